"""Command-line entry points.

simulate: replicated study over generated datasets, fitting the requested
model rows and writing frequentist summaries, per-replicate KL values, and
a reproducibility manifest.
analyze: fit the non-spatial and spatial models to a user-supplied CSV with
residual autocorrelation tests, convergence diagnostics, and DIC.
scale-precision: print the scaling constant and spectral summary of a CAR
or SAR precision built from an adjacency file.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 I/O error. MBYM2_JOBS sets the default worker count; flags override
config-file fields which override built-in defaults.
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .conditioned import (conditional_intervals, conditioned_estimate,
                          sample_conditioned)
from .datagen import generate_dataset, GenerationParams, unconditional_estimand
from .evaluation import (dic, eval_report_csv, frequentist_eval, gearys_c,
                         hpd_interval, kl_fit_summary, kl_samples_csv, morans_i,
                         permutation_test, rhat_ess, structured_generation,
                         structured_nonspatial, structured_spatial)
from .mcmc import ChainState, run_chain, run_chains, SpatialConfig
from .nonspatial import default_sigma0, fit_nonspatial, sample_nonspatial
from .spatial import (bundled_california_graph, car_precision, load_adjacency,
                      projected_spectral, sar_precision, scale_precision,
                      spectral_decompose)


class ConfigError(ValueError):
    """Bad configuration or missing referenced file (exit code 1)."""


MODELS = ("nonspatial", "conditioned-car", "conditioned-sar",
          "unconditioned-car", "unconditioned-sar")

DEFAULT_GENERATION = {
    "kind": "car",
    "alpha": 0.99,
    "beta0": [0.0, 2.0],
    "B1": [[1.0, 3.0]],
    "delta0": [0.5, 0.5],
    "D1": [[0.3, 0.3]],
    "mu": [0.5],
    # upper Cholesky factor of the noise covariance [[1.5, 1.0], [1.0, 1.5]]
    "A": [[1.224744871391589, 0.816496580927726],
          [0.0, 0.9128709291752769]],
    "C": [[2.0]],
    "rho": [0.9, 0.7],
}

DEFAULT_SIM_SAMPLER = {
    "v": 2.0, "lambda_R": 0.01, "s1": 0.10, "s2": 0.15, "s3": 0.25,
    "iterations": 40000, "burn_in": 20000, "thin": 1, "chain_count": 1,
    "beta_prior_precision": 0.0, "collapse_B": True,
}

DEFAULT_ANALYZE_SAMPLER = {
    "v": 3.0, "lambda_R": 0.01, "s1": 0.10, "s2": 0.15, "s3": 0.25,
    "iterations": 55000, "burn_in": 5000, "thin": 5, "chain_count": 4,
    "beta_prior_precision": 0.0, "collapse_B": True,
}

DEFAULT_EVALUATION = {
    "replicates": 300, "level": 0.95, "models": list(MODELS),
    "kl_draws": 200, "posterior_draws": 10000, "alpha": 0.99,
}

DEFAULT_ANALYZE = {
    "outcomes": [], "covariates": [], "kind": "car", "alpha": 0.99,
    "n_perm": 9999, "level": 0.95,
}


@dataclass
class RunConfig:
    """Resolved settings for one invocation."""

    mode: str
    adjacency: Optional[str]
    data: Optional[str]
    out: Optional[str]
    seed: int
    jobs: int
    generation: dict
    sampler: dict
    evaluation: dict
    analyze: dict
    alpha: float = 0.99
    kind: str = "both"

    def validate(self):
        if self.mode not in ("simulate", "analyze", "scale-precision"):
            raise ConfigError(f"unknown mode '{self.mode}'")
        for path, label in ((self.adjacency, "adjacency"), (self.data, "data")):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{label} file not found: {path}")
        if self.mode in ("simulate", "analyze") and not self.out:
            raise ConfigError("an output directory is required")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.mode == "simulate":
            models = self.evaluation["models"]
            if not models:
                raise ConfigError("model list must be non-empty")
            unknown = [m for m in models if m not in MODELS]
            if unknown:
                raise ConfigError(f"unknown models {unknown}; choose from {list(MODELS)}")
            if int(self.evaluation["replicates"]) < 1:
                raise ConfigError("replicates must be at least 1")
            if not 0.0 < float(self.evaluation["level"]) < 1.0:
                raise ConfigError("level must lie in (0, 1)")


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def _merged(defaults, override, block):
    out = dict(defaults)
    for key, value in (override or {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown key '{key}' in config block '{block}'")
        out[key] = value
    return out


def _resolve(args):
    doc = _read_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {"seed", "jobs", "adjacency", "data", "out", "generation",
             "sampler", "evaluation", "analyze", "alpha", "kind"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys {sorted(unknown)}")

    def pick(flag, key, default):
        value = getattr(args, flag, None)
        if value is not None:
            return value
        return doc.get(key, default)

    mode = args.mode
    sampler_defaults = DEFAULT_ANALYZE_SAMPLER if mode == "analyze" else DEFAULT_SIM_SAMPLER
    env_jobs = os.environ.get("MBYM2_JOBS")
    config = RunConfig(
        mode=mode,
        adjacency=pick("adjacency", "adjacency", None),
        data=pick("data", "data", None),
        out=pick("out", "out", None),
        seed=int(pick("seed", "seed", 0)),
        jobs=int(pick("jobs", "jobs", int(env_jobs) if env_jobs else 1)),
        generation=_merged(DEFAULT_GENERATION, doc.get("generation"), "generation"),
        sampler=_merged(sampler_defaults, doc.get("sampler"), "sampler"),
        evaluation=_merged(DEFAULT_EVALUATION, doc.get("evaluation"), "evaluation"),
        analyze=_merged(DEFAULT_ANALYZE, doc.get("analyze"), "analyze"),
        alpha=float(pick("alpha", "alpha", 0.99)),
        kind=pick("kind", "kind", "both"),
    )
    if getattr(args, "replicates", None) is not None:
        config.evaluation["replicates"] = int(args.replicates)
    if getattr(args, "models", None) is not None:
        config.evaluation["models"] = [m.strip() for m in args.models.split(",") if m.strip()]
    if getattr(args, "outcomes", None) is not None:
        config.analyze["outcomes"] = [c.strip() for c in args.outcomes.split(",") if c.strip()]
    if getattr(args, "covariates", None) is not None:
        config.analyze["covariates"] = [c.strip() for c in args.covariates.split(",") if c.strip()]
    if getattr(args, "chains", None) is not None:
        config.sampler["chain_count"] = int(args.chains)
    config.validate()
    return config


def _load_graph(adjacency):
    if adjacency is None:
        return bundled_california_graph()
    try:
        return load_adjacency(adjacency)
    except ValueError as exc:
        raise ConfigError(f"bad adjacency file {adjacency}: {exc}") from exc


def _build_scaled(graph, kind, alpha):
    if kind == "car":
        return scale_precision(car_precision(graph, alpha), "car", alpha)
    if kind == "sar":
        return scale_precision(sar_precision(graph, alpha), "sar", alpha)
    raise ConfigError(f"precision kind must be 'car' or 'sar', got '{kind}'")


def _generation_params(gen, graph):
    try:
        V_phi = _build_scaled(graph, gen["kind"], float(gen["alpha"]))
        return GenerationParams(
            beta0=np.asarray(gen["beta0"], dtype=float),
            B1=np.atleast_2d(np.asarray(gen["B1"], dtype=float)),
            delta0=np.asarray(gen["delta0"], dtype=float),
            D1=np.atleast_2d(np.asarray(gen["D1"], dtype=float)),
            mu=np.atleast_1d(np.asarray(gen["mu"], dtype=float)),
            A=np.asarray(gen["A"], dtype=float),
            C=np.atleast_2d(np.asarray(gen["C"], dtype=float)),
            rho=np.asarray(gen["rho"], dtype=float),
            V_phi=V_phi,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad generation block: {exc}") from exc


def _round6(obj):
    if isinstance(obj, dict):
        return {key: _round6(val) for key, val in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(val) for val in obj]
    if isinstance(obj, float):
        return float(f"{obj:.6g}")
    return obj


def _hpd_stack(draws, level):
    nd, q, k = draws.shape
    lo = np.empty((q, k))
    hi = np.empty((q, k))
    for i in range(q):
        for j in range(k):
            lo[i, j], hi[i, j] = hpd_interval(draws[:, i, j], level)
    return lo, hi


def _kl_indices(available, wanted):
    return np.unique(np.linspace(0, available - 1, min(wanted, available)).round().astype(int))


def _fit_model(model, Y, X, Sigma0, p_gen, rng, ctx):
    level = ctx["level"]
    kl_draws = ctx["kl_draws"]
    v = ctx["sampler"]["v"]
    if model == "nonspatial":
        post = fit_nonspatial(Y, X, v, Sigma0)
        B_d, S_d = sample_nonspatial(post, ctx["posterior_draws"], rng)
        lo, hi = _hpd_stack(B_d, level)
        sel = _kl_indices(B_d.shape[0], kl_draws)
        specs = [structured_nonspatial(X, B_d[t], S_d[t]) for t in sel]
        record = {"estimate": post.B_hat, "lo": lo, "hi": hi,
                  "posterior_variance": B_d.var(axis=0, ddof=1)}
        return record, kl_fit_summary(p_gen, specs)

    kind = model.rsplit("-", 1)[1]
    prec = ctx["analysis"][kind]
    spectral = ctx["spectral"][kind]
    q, k = X.shape[1], Y.shape[1]
    if model.startswith("conditioned"):
        proj = projected_spectral(prec, X)
        cp = conditioned_estimate(Y, X, ctx["A"], ctx["rho"], prec, proj)
        lo, hi = conditional_intervals(cp, level)
        var = np.diag(cp.var_B).reshape(k, q).T
        draws = sample_conditioned(cp, kl_draws, rng)
        specs = [structured_spatial(X, draws[t], ctx["A"], ctx["rho"], spectral)
                 for t in range(draws.shape[0])]
        record = {"estimate": cp.B_tilde, "lo": lo, "hi": hi,
                  "posterior_variance": var}
        return record, kl_fit_summary(p_gen, specs)

    scfg = SpatialConfig(precision=prec, Sigma0=Sigma0, chain_count=1,
                         save_G=False, **ctx["sampler"])
    out = run_chain(scfg, Y, X, rng=rng)
    B_d = out.B_draws()
    lo, hi = _hpd_stack(B_d, level)
    sel = _kl_indices(len(out.draws), kl_draws)
    specs = [structured_spatial(X, out.draws[t].B, out.draws[t].M,
                                out.draws[t].R, spectral) for t in sel]
    record = {"estimate": B_d.mean(axis=0), "lo": lo, "hi": hi,
              "posterior_variance": B_d.var(axis=0, ddof=1)}
    return record, kl_fit_summary(p_gen, specs)


def _replicate_task(arg):
    index, seed_seq, ctx = arg
    try:
        streams = seed_seq.spawn(1 + len(ctx["models"]))
        data = generate_dataset(ctx["params"], np.random.default_rng(streams[0]))
        Y, X = data.Y, data.X
        Sigma0 = default_sigma0(Y, X)
        p_gen = structured_generation(ctx["params"], X, ctx["spectral_gen"])
        records, kls = {}, {}
        for mi, model in enumerate(ctx["models"]):
            rng = np.random.default_rng(streams[1 + mi])
            records[model], kls[model] = _fit_model(model, Y, X, Sigma0, p_gen, rng, ctx)
        return index, {"records": records, "kls": kls}, None
    except Exception as exc:  # noqa: BLE001 - logged per replicate, counted by caller
        return index, None, f"{type(exc).__name__}: {exc}"


def cmd_simulate(config):
    """Run the replicated study and write report, KL, and manifest artifacts."""
    t_start = time.perf_counter()
    graph = _load_graph(config.adjacency)
    params = _generation_params(config.generation, graph)
    models = list(config.evaluation["models"])
    replicates = int(config.evaluation["replicates"])
    kinds = sorted({m.rsplit("-", 1)[1] for m in models if m != "nonspatial"})
    alpha = float(config.evaluation["alpha"])
    analysis = {kind: _build_scaled(graph, kind, alpha) for kind in kinds}
    sampler = dict(config.sampler)
    sampler.pop("chain_count", None)
    ctx = {
        "params": params,
        "models": models,
        "analysis": analysis,
        "spectral": {kind: spectral_decompose(prec.precision)
                     for kind, prec in analysis.items()},
        "spectral_gen": spectral_decompose(params.V_phi.precision),
        "A": params.A,
        "rho": params.rho,
        "sampler": sampler,
        "level": float(config.evaluation["level"]),
        "kl_draws": int(config.evaluation["kl_draws"]),
        "posterior_draws": int(config.evaluation["posterior_draws"]),
    }
    master = np.random.SeedSequence(config.seed)
    children = master.spawn(replicates)
    tasks = [(i, children[i], ctx) for i in range(replicates)]
    if config.jobs > 1:
        chunk = max(1, replicates // (4 * config.jobs))
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=chunk))
    else:
        results = [_replicate_task(task) for task in tasks]

    failures = [(idx, err) for idx, _, err in results if err is not None]
    if len(failures) > 0.05 * replicates:
        raise RuntimeError(
            f"{len(failures)} of {replicates} replicates failed; first: "
            f"replicate {failures[0][0]}: {failures[0][1]}")
    ok = [res for _, res, err in results if err is None]
    if not ok:
        raise RuntimeError("no replicate succeeded")

    F_true = unconditional_estimand(params)
    records = {m: [r["records"][m] for r in ok] for m in models}
    reports = {m: frequentist_eval(records[m], F_true, min_count=1) for m in models}
    kls = {m: [r["kls"][m] for r in ok] for m in models}

    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    eval_report_csv(reports, outdir / "report.csv")
    with open(outdir / "report.json", "w") as f:
        json.dump({m: _round6(rep.as_dict()) for m, rep in reports.items()},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    kl_samples_csv(kls, outdir / "kl.csv")
    manifest = {
        "mode": "simulate",
        "version": __version__,
        "seed": config.seed,
        "jobs": config.jobs,
        "adjacency": config.adjacency or "bundled california counties",
        "config": {"generation": config.generation, "sampler": config.sampler,
                   "evaluation": config.evaluation},
        "replicate_spawn_keys": [list(c.spawn_key) for c in children],
        "failures": [{"replicate": idx, "error": err} for idx, err in failures],
        "succeeded": len(ok),
        "wall_time_s": time.perf_counter() - t_start,
    }
    with open(outdir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"reports": reports, "kls": kls, "failures": failures,
            "records": records}


def _standardize_columns(frame, columns):
    out = {}
    for name in columns:
        col = frame[name].to_numpy(dtype=float)
        centered = col - col.mean()
        sd = centered.std(ddof=1)
        out[name] = centered / sd if sd > 0 else centered
    return out


def cmd_analyze(config):
    """Fit both model families to a CSV dataset and write result tables."""
    t_start = time.perf_counter()
    if not config.data:
        raise ConfigError("analyze requires a data CSV (--data)")
    outcomes = list(config.analyze["outcomes"])
    covariates = list(config.analyze["covariates"])
    if not outcomes or not covariates:
        raise ConfigError("analyze requires outcome and covariate column names")
    frame = pd.read_csv(config.data)
    used = outcomes + covariates
    absent = [c for c in used if c not in frame.columns]
    if absent:
        raise ConfigError(f"data file lacks columns {absent}")
    graph = _load_graph(config.adjacency)
    if len(frame) != graph.n:
        raise ConfigError(
            f"data has {len(frame)} rows but the adjacency has {graph.n} regions")
    na_rows = frame.index[frame[used].isna().any(axis=1)].tolist()
    if na_rows:
        raise ConfigError(f"missing values in rows {na_rows}; refusing to impute")

    std = _standardize_columns(frame, used)
    Y = np.column_stack([std[c] for c in outcomes])
    X = np.column_stack([np.ones(graph.n)] + [std[c] for c in covariates])
    k = Y.shape[1]
    level = float(config.analyze["level"])
    n_perm = int(config.analyze["n_perm"])

    master = np.random.SeedSequence(config.seed)
    s_perm, s_ns, s_mcmc = master.spawn(3)
    perm_rng = np.random.default_rng(s_perm)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    autocorr = []
    for j, name in enumerate(outcomes):
        autocorr.append({
            "outcome": name,
            "morans_i": morans_i(resid[:, j], graph),
            "moran_p": permutation_test(morans_i, resid[:, j], graph, n_perm,
                                        perm_rng, alternative="two-sided"),
            "gearys_c": gearys_c(resid[:, j], graph),
            "geary_p": permutation_test(gearys_c, resid[:, j], graph, n_perm,
                                        perm_rng, alternative="less"),
        })

    prec = _build_scaled(graph, config.analyze["kind"], float(config.analyze["alpha"]))
    spectral = spectral_decompose(prec.precision)
    Sigma0 = default_sigma0(Y, X)
    sampler = dict(config.sampler)
    scfg = SpatialConfig(precision=prec, Sigma0=Sigma0, save_G=False, **sampler)
    outs = run_chains(scfg, Y, X, rng=s_mcmc)
    pooled = [d for out in outs for d in out.draws]
    B_pool = np.concatenate([out.B_draws() for out in outs])

    post = fit_nonspatial(Y, X, sampler["v"], Sigma0)
    B_ns, S_ns = sample_nonspatial(post, B_pool.shape[0], np.random.default_rng(s_ns))

    design_names = ["intercept"] + covariates
    coef_rows = []
    for label, draws in (("nonspatial", B_ns), ("spatial", B_pool)):
        for i, dname in enumerate(design_names):
            for j, oname in enumerate(outcomes):
                lo, hi = hpd_interval(draws[:, i, j], level)
                coef_rows.append({
                    "model": label, "coefficient": dname, "outcome": oname,
                    "mean": draws[:, i, j].mean(), "hpd_lo": lo, "hpd_hi": hi,
                    "significant": bool(lo > 0.0 or hi < 0.0),
                })

    diag_rows = []
    per_chain = [out.B_draws() for out in outs]
    for i, dname in enumerate(design_names):
        for j, oname in enumerate(outcomes):
            chains = np.stack([b[:, i, j] for b in per_chain])
            rhat, ess = rhat_ess(chains)
            diag_rows.append({"parameter": f"B[{dname},{oname}]",
                              "rhat": rhat, "ess": ess})

    ns_states = [ChainState(B=B_ns[t], G=None, M=np.linalg.cholesky(S_ns[t]).T,
                            R=np.zeros(k)) for t in range(B_ns.shape[0])]
    dics = {"spatial": dic(pooled, Y, X, spectral),
            "nonspatial": dic(ns_states, Y, X, spectral)}

    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(coef_rows).to_csv(outdir / "coefficients.csv", index=False,
                                   float_format="%.6g")
    pd.DataFrame(diag_rows).to_csv(outdir / "diagnostics.csv", index=False,
                                   float_format="%.6g")
    pd.DataFrame(autocorr).to_csv(outdir / "autocorrelation.csv", index=False,
                                  float_format="%.6g")
    manifest = {
        "mode": "analyze",
        "version": __version__,
        "seed": config.seed,
        "data": config.data,
        "adjacency": config.adjacency or "bundled california counties",
        "outcomes": outcomes,
        "covariates": covariates,
        "config": {"sampler": config.sampler, "analyze": config.analyze},
        "chain_seeds": [out.seed for out in outs],
        "acceptance": [{"M": out.accept_M, "R": out.accept_R} for out in outs],
        "dic": _round6(dics),
        "wall_time_s": time.perf_counter() - t_start,
    }
    with open(outdir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"coefficients": coef_rows, "diagnostics": diag_rows,
            "autocorrelation": autocorr, "dic": dics}


def cmd_scale_precision(config):
    """Print scaling constants and spectral summaries for CAR/SAR structures."""
    graph = _load_graph(config.adjacency)
    kinds = ("car", "sar") if config.kind == "both" else (config.kind,)
    results = []
    for kind in kinds:
        sp = _build_scaled(graph, kind, config.alpha)
        eigs = np.linalg.eigvalsh(sp.precision)
        gmean = float(np.exp(np.mean(np.log(sp.covariance_diag))))
        info = {"kind": kind, "alpha": config.alpha, "c": sp.c,
                "eig_min": float(eigs[0]), "eig_max": float(eigs[-1]),
                "marginal_variance_gmean": gmean}
        results.append(info)
        print(f"kind={kind} alpha={config.alpha:.6g} c={sp.c:.6g} "
              f"eig_min={eigs[0]:.6g} eig_max={eigs[-1]:.6g} "
              f"marginal_variance_gmean={gmean:.6g}")
    return results


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="mbym2", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="mode", required=True)

    sim = sub.add_parser("simulate", help="replicated simulation study")
    sim.add_argument("--config", help="JSON config file")
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--jobs", type=int)
    sim.add_argument("--adjacency", help="adjacency file (default: bundled)")
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--models", help="comma-separated model list")

    ana = sub.add_parser("analyze", help="fit models to a CSV dataset")
    ana.add_argument("--config", help="JSON config file")
    ana.add_argument("--data", help="data CSV")
    ana.add_argument("--adjacency", help="adjacency file (default: bundled)")
    ana.add_argument("--out", help="output directory")
    ana.add_argument("--seed", type=int)
    ana.add_argument("--outcomes", help="comma-separated outcome columns")
    ana.add_argument("--covariates", help="comma-separated covariate columns")
    ana.add_argument("--chains", type=int)

    scp = sub.add_parser("scale-precision", help="print scaling constants")
    scp.add_argument("--config", help="JSON config file")
    scp.add_argument("--adjacency", help="adjacency file (default: bundled)")
    scp.add_argument("--alpha", type=float)
    scp.add_argument("--kind", choices=("car", "sar", "both"))
    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        config = _resolve(args)
        if config.mode == "simulate":
            cmd_simulate(config)
        elif config.mode == "analyze":
            cmd_analyze(config)
        else:
            cmd_scale_precision(config)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
