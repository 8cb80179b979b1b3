"""Replicate-level evaluation, posterior summaries, and fit diagnostics.

Covers the frequentist replication summaries (MSE, coverage, average
posterior variance), HPD intervals, rank-normalized split R-hat with bulk
effective sample size, KL divergence between generation and fitted
marginal densities, permutation tests of residual spatial autocorrelation,
and DIC under the marginalized observation density.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtri
from scipy.stats import rankdata

from .datagen import GaussianSpec, unconditional_estimand


@dataclass(frozen=True)
class EvalReport:
    """Per-coefficient replication summaries over simulated datasets."""

    mse: np.ndarray
    coverage: np.ndarray
    avg_posterior_variance: np.ndarray
    replicate_count: int

    def as_dict(self):
        q, k = self.mse.shape
        out = {"replicate_count": self.replicate_count}
        for block, arr in (("mse", self.mse), ("coverage", self.coverage),
                           ("avg_posterior_variance", self.avg_posterior_variance)):
            out[block] = {f"F_{i + 1}{j + 1}": float(arr[i, j])
                          for i in range(q) for j in range(k)}
        return out


def hpd_interval(samples, level=0.95):
    """Shortest interval spanning ceil(level * count) consecutive order
    statistics; ties resolve toward the lower window."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size < 100:
        raise ValueError("need at least 100 draws for an HPD interval")
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    m = int(np.ceil(level * x.size))
    widths = x[m - 1:] - x[: x.size - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def _autocovariance(x):
    # biased estimator (normalized by n), computed via FFT
    n = x.size
    xc = x - x.mean()
    nfft = 1 << int(2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real
    return acov / n


def rhat_ess(chains):
    """Rank-normalized split R-hat and bulk effective sample size.

    Chains of one scalar parameter, equal lengths. Each chain is split in
    half, the pooled draws are rank-normalized through the standard normal
    quantile function, and the classic potential-scale-reduction and
    autocorrelation-time machinery (pairwise truncation, monotone initial
    sequence) runs on the transformed draws. Constant input yields NaN with
    a warning.
    """
    arr = np.atleast_2d(np.asarray(chains, dtype=float))
    if arr.ndim != 2:
        raise ValueError("chains must form a 2-D array")
    m, N = arr.shape
    if N < 8:
        raise ValueError("need at least 8 draws per chain")
    half = N // 2
    split = np.concatenate([arr[:, :half], arr[:, N - half:]], axis=0)
    if np.all(split == split.ravel()[0]):
        warnings.warn("constant chains: R-hat and ESS undefined", RuntimeWarning)
        return float("nan"), float("nan")
    S = split.size
    ranks = rankdata(split, method="average").reshape(split.shape)
    z = ndtri((ranks - 0.375) / (S + 0.25))

    chain_means = z.mean(axis=1)
    W = z.var(axis=1, ddof=1).mean()
    if W <= 0:
        warnings.warn("zero within-chain variance: R-hat and ESS undefined",
                      RuntimeWarning)
        return float("nan"), float("nan")
    B_over_n = chain_means.var(ddof=1)
    var_plus = (half - 1) / half * W + B_over_n
    rhat = float(np.sqrt(var_plus / W))

    acov = np.stack([_autocovariance(row) for row in split])
    s_t = acov.mean(axis=0)
    rho = 1.0 - (W - s_t) / var_plus
    L = rho.size // 2
    pairs = rho[0:2 * L:2] + rho[1:2 * L:2]
    negative = np.nonzero(pairs < 0)[0]
    if negative.size:
        pairs = pairs[: negative[0]]
    if pairs.size == 0:
        return rhat, float(S)
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    ess = float(S / tau) if tau > 0 else float(S)
    return rhat, ess


_RECORD_KEYS = ("estimate", "lo", "hi", "posterior_variance")


def frequentist_eval(records, F_true, min_count=30):
    """Summarize replicate records into MSE / coverage / average variance.

    Each record supplies 'estimate', 'lo', 'hi', 'posterior_variance'
    arrays shaped like F_true.
    """
    F_true = np.asarray(F_true, dtype=float)
    floor = max(int(min_count), 1)
    if len(records) < floor:
        raise ValueError(f"need at least {floor} replicates")
    stacks = {}
    for key in _RECORD_KEYS:
        try:
            stacks[key] = np.stack([np.asarray(rec[key], dtype=float) for rec in records])
        except KeyError:
            raise ValueError(f"replicate record missing field '{key}'") from None
        if stacks[key].shape[1:] != F_true.shape:
            raise ValueError(f"field '{key}' does not match the estimand shape")
    mse = np.mean((stacks["estimate"] - F_true) ** 2, axis=0)
    covered = (stacks["lo"] <= F_true) & (F_true <= stacks["hi"])
    return EvalReport(
        mse=mse,
        coverage=covered.mean(axis=0),
        avg_posterior_variance=stacks["posterior_variance"].mean(axis=0),
        replicate_count=len(records),
    )


def gaussian_kl(p, q):
    """KL divergence between two dense Gaussians given as GaussianSpec."""
    if p.mean.shape != q.mean.shape:
        raise ValueError("dimension mismatch between the two densities")
    d = p.mean.size
    try:
        cq = cho_factor(q.cov, lower=True)
        cp = cho_factor(p.cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariances must be positive definite") from exc
    trace = float(np.trace(cho_solve(cq, p.cov)))
    diff = q.mean - p.mean
    quad = float(diff @ cho_solve(cq, diff))
    logdet_q = 2.0 * np.sum(np.log(np.diag(cq[0])))
    logdet_p = 2.0 * np.sum(np.log(np.diag(cp[0])))
    return 0.5 * (trace + quad - d + logdet_q - logdet_p)


@dataclass(frozen=True)
class StructuredGaussian:
    """Matrix Gaussian with covariance spatial_cov (x) W + noise_cov (x) I.

    W is the spatial covariance carried through its eigenbasis Q and
    eigenvalues cov_eigs; the density factorizes into k x k blocks per
    spatial eigenvector, which keeps KL computations cheap.
    """

    mean: np.ndarray
    spatial_cov: np.ndarray
    noise_cov: np.ndarray
    Q: np.ndarray
    cov_eigs: np.ndarray

    def blocks(self):
        return (self.spatial_cov[None, :, :] * self.cov_eigs[:, None, None]
                + self.noise_cov[None, :, :])

    def to_dense(self):
        W = (self.Q * self.cov_eigs) @ self.Q.T
        n = self.Q.shape[0]
        cov = np.kron(self.spatial_cov, W) + np.kron(self.noise_cov, np.eye(n))
        return GaussianSpec(mean=self.mean.flatten(order="F"), cov=0.5 * (cov + cov.T))


def structured_nonspatial(X, B, Sigma):
    n = X.shape[0]
    return StructuredGaussian(
        mean=X @ B,
        spatial_cov=np.zeros_like(np.atleast_2d(Sigma)),
        noise_cov=np.atleast_2d(Sigma),
        Q=np.eye(n),
        cov_eigs=np.ones(n),
    )


def structured_spatial(X, B, M, R, spectral):
    r = np.diag(R) if np.asarray(R).ndim == 2 else np.asarray(R, dtype=float)
    return StructuredGaussian(
        mean=X @ B,
        spatial_cov=M.T @ (r[:, None] * M),
        noise_cov=M.T @ ((1.0 - r)[:, None] * M),
        Q=spectral.Q,
        cov_eigs=1.0 / spectral.Lambda,
    )


def structured_generation(params, X, spectral):
    """Marginal density of Y given X under the generation model."""
    A, rho = params.A, params.rho
    return StructuredGaussian(
        mean=X @ unconditional_estimand(params),
        spatial_cov=A.T @ (rho[:, None] * A),
        noise_cov=A.T @ ((1.0 - rho)[:, None] * A),
        Q=spectral.Q,
        cov_eigs=1.0 / spectral.Lambda,
    )


def structured_kl(p, q):
    """KL divergence between two StructuredGaussian densities.

    The trace couples the two spatial eigenbases only through the squared
    Gram matrix of their eigenvectors, so everything reduces to k x k block
    operations.
    """
    n, k = p.mean.shape
    if q.mean.shape != (n, k):
        raise ValueError("dimension mismatch between the two densities")
    Sp = p.blocks()
    Sq = q.blocks()
    Sq_inv = np.linalg.inv(Sq)
    gram2 = (q.Q.T @ p.Q) ** 2
    pair_traces = np.einsum("iab,mba->im", Sq_inv, Sp)
    trace = float(np.einsum("im,im->", gram2, pair_traces))
    D = q.Q.T @ (q.mean - p.mean)
    quad = float(np.einsum("ia,iab,ib->", D, Sq_inv, D))
    sign_q, logdet_q = np.linalg.slogdet(Sq)
    sign_p, logdet_p = np.linalg.slogdet(Sp)
    if np.any(sign_q <= 0) or np.any(sign_p <= 0):
        raise ValueError("covariance blocks must be positive definite")
    return 0.5 * (trace + quad - n * k + float(logdet_q.sum() - logdet_p.sum()))


def kl_fit_summary(generation, fitted_draws):
    """Posterior mean KL divergence of the generation density from the fits."""
    values = [structured_kl(generation, q) for q in fitted_draws]
    if not values:
        raise ValueError("need at least one fitted density")
    return float(np.mean(values))


def morans_i(residuals, graph):
    e = np.asarray(residuals, dtype=float)
    e = e - e.mean()
    denom = float(e @ e)
    if denom <= 0:
        raise ValueError("residuals are constant")
    S0 = graph.W.sum()
    return float(graph.n / S0 * (e @ graph.W @ e) / denom)


def gearys_c(residuals, graph):
    e = np.asarray(residuals, dtype=float)
    e = e - e.mean()
    denom = float(e @ e)
    if denom <= 0:
        raise ValueError("residuals are constant")
    S0 = graph.W.sum()
    # sum_ij W_ij (e_i - e_j)^2 = 2 e' (D - W) e for symmetric binary W
    num = 2.0 * float(e @ ((graph.D_W - graph.W) @ e))
    return float((graph.n - 1) / (2.0 * S0) * num / denom)


def permutation_test(stat_fn, residuals, graph, n_perm, rng, alternative="two-sided"):
    """Permutation p-value (1 + #as-or-more-extreme) / (n_perm + 1)."""
    if n_perm < 999:
        raise ValueError("need at least 999 permutations")
    if alternative not in ("two-sided", "less", "greater"):
        raise ValueError("alternative must be two-sided, less, or greater")
    rng = np.random.default_rng(rng)
    e = np.asarray(residuals, dtype=float)
    observed = stat_fn(e, graph)
    perms = np.empty(n_perm)
    for b in range(n_perm):
        perms[b] = stat_fn(rng.permutation(e), graph)
    if alternative == "greater":
        count = int(np.sum(perms >= observed))
    elif alternative == "less":
        count = int(np.sum(perms <= observed))
    else:
        center = perms.mean()
        count = int(np.sum(np.abs(perms - center) >= abs(observed - center)))
    return (1 + count) / (n_perm + 1)


def _marginal_loglik(B, M, r, Y, X, spectral):
    # observation density with the spatial field integrated out:
    # per spatial eigenvector i, a k-variate Gaussian with covariance
    # M'RM * w_i + M'(I-R)M
    n, k = Y.shape
    S_spatial = M.T @ (r[:, None] * M)
    S_noise = M.T @ ((1.0 - r)[:, None] * M)
    w = 1.0 / spectral.Lambda
    blocks = S_spatial[None, :, :] * w[:, None, None] + S_noise[None, :, :]
    Yc = spectral.Q.T @ (Y - X @ B)
    sign, logdet = np.linalg.slogdet(blocks)
    if np.any(sign <= 0):
        raise ValueError("marginal covariance blocks must be positive definite")
    quad = np.einsum("ia,iab,ib->", Yc, np.linalg.inv(blocks), Yc)
    return float(-0.5 * (n * k * np.log(2.0 * np.pi) + logdet.sum() + quad))


def dic(draws, Y, X, spectral):
    """Deviance information criterion under the marginalized likelihood.

    DIC = -2 log p(Y | theta_bar) + 2 p_D with
    p_D = 2 (log p(Y | theta_bar) - mean log p(Y | theta)).
    """
    if not draws:
        raise ValueError("need at least one draw")
    logliks = np.array([
        _marginal_loglik(d.B, d.M, d.R, Y, X, spectral) for d in draws
    ])
    B_bar = np.mean([d.B for d in draws], axis=0)
    M_bar = np.mean([d.M for d in draws], axis=0)
    r_bar = np.mean([d.R for d in draws], axis=0)
    at_mean = _marginal_loglik(B_bar, M_bar, r_bar, Y, X, spectral)
    if not (np.isfinite(at_mean) and np.all(np.isfinite(logliks))):
        raise ValueError("non-finite log likelihood in DIC computation")
    p_d = 2.0 * (at_mean - logliks.mean())
    return -2.0 * at_mean + 2.0 * p_d


def eval_report_csv(reports, path):
    """Write replication summaries as CSV: block rows x model x coefficient."""
    rows = []
    for block in ("mse", "coverage", "avg_posterior_variance"):
        for model, report in reports.items():
            d = report.as_dict()[block]
            row = {"block": block, "model": model,
                   "replicates": report.replicate_count}
            row.update(d)
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.6g")


def kl_samples_csv(samples, path):
    """Write per-replicate posterior-mean KL values, one column per model."""
    pd.DataFrame({k: pd.Series(np.asarray(v, dtype=float)) for k, v in samples.items()}
                 ).to_csv(path, index=False, float_format="%.6g")
