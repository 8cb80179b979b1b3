"""Metropolis-within-Gibbs sampler for the full spatial model.

State is (B, G, M, R): regression coefficients, spatial effects, the upper
triangular mixing factor with Sigma_S = M^T M, and the per-outcome spatial
proportions. B and G have exact Gaussian full conditionals; M and R move by
random-walk Metropolis on log-diagonal / off-diagonal entries and on the
logit scale respectively. R carries a penalized-complexity prior that decays
exponentially in the root Kullback-Leibler distance from the no-spatial
model; M carries an inverse-Wishart prior on M^T M restated on the factor.

By default the B step draws from the spatial-effect-marginalized conditional
B | Y, M, R instead of B | Y, G, M, R, so that (B, G) update as one joint
block. Both sweeps leave the same posterior invariant, but the blocked form
avoids the near-collinear random walk between the intercepts and the smooth
component of G, whose autocorrelation time otherwise grows into hundreds of
sweeps on strongly spatial data.
"""

import time
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit

from .conditioned import conditioned_estimate, sample_conditioned
from .spatial import ScaledPrecision, projected_spectral, spectral_decompose

_REJECTION_CAP = 10_000_000
_R_FLOOR = 1e-12


@dataclass(frozen=True)
class SpatialConfig:
    """Sampler configuration: spatial structure, priors, proposal scales.

    s1 scales the log-normal walk on the diagonal of M, s2 the additive walk
    on its upper off-diagonal entries, s3 the logit walk on R. Draw count per
    chain is (iterations - burn_in) / thin, which must divide evenly.
    collapse_B selects the blocked (B, G) update; turning it off restores the
    plain one-at-a-time Gibbs pair, which is required when a proper prior is
    placed on B via beta_prior_precision.
    """

    precision: ScaledPrecision
    v: float
    Sigma0: np.ndarray
    lambda_R: float = 0.01
    s1: float = 0.10
    s2: float = 0.15
    s3: float = 0.25
    iterations: int = 12000
    burn_in: int = 2000
    thin: int = 5
    chain_count: int = 4
    seed: Optional[int] = None
    beta_prior_precision: float = 0.0
    collapse_B: bool = True
    save_G: bool = True

    def __post_init__(self):
        Sigma0 = np.atleast_2d(np.asarray(self.Sigma0, dtype=float))
        object.__setattr__(self, "Sigma0", Sigma0)
        k = Sigma0.shape[0]
        if Sigma0.shape != (k, k) or not np.allclose(Sigma0, Sigma0.T):
            raise ValueError("Sigma0 must be a symmetric square matrix")
        np.linalg.cholesky(Sigma0)
        if not self.v > k - 1:
            raise ValueError(f"v must exceed {k - 1} for a {k}-outcome model")
        if self.lambda_R <= 0:
            raise ValueError("lambda_R must be positive")
        if min(self.s1, self.s2, self.s3) <= 0:
            raise ValueError("proposal scales must be positive")
        if self.thin < 1 or self.burn_in < 0 or self.iterations <= self.burn_in:
            raise ValueError("need iterations > burn_in >= 0 and thin >= 1")
        if (self.iterations - self.burn_in) % self.thin:
            raise ValueError("thin must divide iterations - burn_in")
        if self.chain_count < 1:
            raise ValueError("chain_count must be at least 1")
        if self.beta_prior_precision < 0:
            raise ValueError("beta_prior_precision must be nonnegative")
        if self.collapse_B and self.beta_prior_precision != 0.0:
            raise ValueError("collapse_B assumes a flat prior on B; "
                             "disable it when beta_prior_precision > 0")

    @property
    def k(self):
        return self.Sigma0.shape[0]


@dataclass
class ChainState:
    """One sampler state. M is upper triangular with positive diagonal."""

    B: np.ndarray
    G: Optional[np.ndarray]
    M: np.ndarray
    R: np.ndarray

    def validate(self):
        if np.any(np.diag(self.M) <= 0):
            raise ValueError("M must have a strictly positive diagonal")
        if np.any(np.tril(self.M, -1) != 0):
            raise ValueError("M must be upper triangular")
        if np.any(self.R <= 0) or np.any(self.R >= 1):
            raise ValueError("spatial proportions must lie strictly inside (0, 1)")


@dataclass
class ChainOutput:
    """Thinned post-burn-in snapshots plus move diagnostics."""

    draws: list
    accept_M: float
    accept_R: float
    seed: Optional[str] = None
    wall_time: float = 0.0

    def B_draws(self):
        return np.stack([d.B for d in self.draws])

    def G_draws(self):
        if self.draws and self.draws[0].G is None:
            return None
        return np.stack([d.G for d in self.draws])

    def M_draws(self):
        return np.stack([d.M for d in self.draws])

    def R_draws(self):
        return np.stack([d.R for d in self.draws])


class LogTarget(NamedTuple):
    loglik_plus_G_prior: float
    log_M_prior: float
    log_R_prior: float


def pc_kld(R, lambdas):
    """Twice the KL divergence of the R-mixed field from the independent one.

    lambdas are the eigenvalues of the scaled spatial precision. Result is
    -n*sum(r) + sum(r)*sum(1/lambda) - sum_ij log(1 - r_i + r_i/lambda_j).
    """
    r = np.atleast_1d(np.asarray(R, dtype=float))
    lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if np.any(lam <= 0):
        raise ValueError("precision eigenvalues must be positive")
    if np.any(r < 0) or np.any(r >= 1):
        raise ValueError("spatial proportions must lie in [0, 1)")
    n = lam.size
    inv_lam = 1.0 / lam
    value = -n * r.sum() + r.sum() * inv_lam.sum() \
        - np.log1p(np.outer(r, inv_lam - 1.0)).sum()
    if value < -1e-10:
        raise ValueError(f"divergence evaluated to {value:.3e}; expected nonnegative")
    return max(value, 0.0)


def pc_log_density(R, lambda_R, lambdas):
    """Log prior density of R up to a constant: -lambda_R * sqrt(pc_kld)."""
    return -lambda_R * np.sqrt(pc_kld(R, lambdas))


def pc_rejection_sample(lambda_R, lambdas, k, rng):
    """One draw of R: uniform proposals thinned by the exponential penalty."""
    if lambda_R <= 0:
        raise ValueError("lambda_R must be positive")
    rng = np.random.default_rng(rng)
    for _ in range(_REJECTION_CAP):
        r = rng.uniform(size=k)
        if rng.uniform() < np.exp(-lambda_R * np.sqrt(pc_kld(r, lambdas))):
            return r
    raise RuntimeError(f"no acceptance within {_REJECTION_CAP} proposals; "
                       "lambda_R is too large for this structure")


def _chol_upper(S):
    return np.linalg.cholesky(S).T


def gibbs_update_beta(state, Y, X, chol_XtX, rng, prior_precision=0.0):
    """Exact draw of B given (G, M, R); chol_XtX is the lower factor of X^T X.

    With prior_precision > 0 an isotropic zero-mean Gaussian prior on vec(B)
    is folded in (used by sampler-correctness checks); the default is flat.
    """
    q = X.shape[1]
    k = state.M.shape[0]
    resid = Y - state.G
    if prior_precision == 0.0:
        B_hat = cho_solve((chol_XtX, True), X.T @ resid)
        Z = rng.standard_normal((q, k))
        E = solve_triangular(chol_XtX, Z, trans="T", lower=True)
        return B_hat + E @ (np.sqrt(1.0 - state.R)[:, None] * state.M)
    Sig_E = state.M.T @ ((1.0 - state.R)[:, None] * state.M)
    Lam = np.kron(np.linalg.inv(Sig_E), X.T @ X) + prior_precision * np.eye(q * k)
    eta = (X.T @ resid @ np.linalg.inv(Sig_E)).flatten(order="F")
    L = np.linalg.cholesky(Lam)
    mean = cho_solve((L, True), eta)
    draw = mean + solve_triangular(L, rng.standard_normal(q * k), trans="T", lower=True)
    return draw.reshape((q, k), order="F")


def collapsed_update_beta(state, Y, X, projection, rng):
    """Exact draw of B given (M, R) with the spatial effects integrated out.

    Followed by gibbs_update_gamma this produces one draw from the joint
    conditional of (B, G) given (M, R), so successive B draws decorrelate at
    the (M, R) time scale rather than crawling along the B-G ridge.
    projection is the design-projected spectral object of the fixed W_phi.
    """
    cp = conditioned_estimate(Y, X, state.M, state.R, None, projected=projection)
    return sample_conditioned(cp, 1, rng)[0]


def gibbs_update_gamma(state, Y, X, spectral, rng):
    """Exact draw of G given (B, M, R), per outcome in the spatial eigenbasis."""
    r = state.R
    if np.any(r <= 0) or np.any(r >= 1):
        raise ValueError("spatial proportions must lie strictly inside (0, 1)")
    M_inv = solve_triangular(state.M, np.eye(state.M.shape[0]), lower=False)
    lam = spectral.Lambda[:, None]
    T_s = spectral.Q.T @ (Y - X @ state.B) @ M_inv
    denom = r + (1.0 - r) * lam
    w = r / denom
    sd = np.sqrt(r * (1.0 - r) / denom)
    Z = rng.standard_normal(T_s.shape)
    return spectral.Q @ (T_s * w + Z * sd) @ state.M


def _column_norms(state, Y, X, sqrt_precision, M=None):
    """Squared column norms of the whitened residual and whitened G."""
    M = state.M if M is None else M
    M_inv = solve_triangular(M, np.eye(M.shape[0]), lower=False)
    resid = (Y - X @ state.B - state.G) @ M_inv
    theta = (sqrt_precision @ state.G) @ M_inv
    return (resid ** 2).sum(axis=0), (theta ** 2).sum(axis=0)


def _loglik_gprior(resid_norms, theta_norms, r, M_diag, n):
    rc = np.clip(r, _R_FLOOR, 1.0 - _R_FLOOR)
    return float(
        -0.5 * np.sum(resid_norms / (1.0 - rc) + theta_norms / rc)
        - 0.5 * n * np.sum(np.log(rc * (1.0 - rc)))
        - 2.0 * n * np.sum(np.log(M_diag))
    )


def _log_M_prior(M, v, Sigma0):
    # inverse-Wishart on M^T M restated on the factor: the change of variables
    # contributes M_ii^(k-i+1), leaving coefficient -(v+i) on log M_ii
    k = M.shape[0]
    d = np.diag(M)
    M_inv = solve_triangular(M, np.eye(k), lower=False)
    trace = float(np.sum(Sigma0 * (M_inv @ M_inv.T)))
    return float(-np.sum((v + np.arange(1, k + 1)) * np.log(d)) - 0.5 * v * trace)


def log_target_components(state, Y, X, spectral, config):
    """Unnormalized log posterior split into its three state-dependent parts."""
    n = Y.shape[0]
    resid_norms, theta_norms = _column_norms(state, Y, X, spectral.sqrt_precision)
    ll = _loglik_gprior(resid_norms, theta_norms, state.R, np.diag(state.M), n)
    lm = _log_M_prior(state.M, config.v, config.Sigma0)
    lr = pc_log_density(state.R, config.lambda_R, spectral.Lambda)
    return LogTarget(ll, lm, lr)


def mh_update_M(state, Y, X, config, rng, spectral=None):
    """Metropolis move of M: log-normal walk on the diagonal, additive walk
    above it, with the proposal-asymmetry correction for the diagonal."""
    spectral = spectral if spectral is not None else spectral_decompose(config.precision)
    M = state.M
    k = M.shape[0]
    n = Y.shape[0]
    diag_idx = np.diag_indices(k)
    off_idx = np.triu_indices(k, 1)
    prop = M.copy()
    prop[diag_idx] = M[diag_idx] * np.exp(config.s1 * rng.standard_normal(k))
    if off_idx[0].size:
        prop[off_idx] = M[off_idx] + config.s2 * rng.standard_normal(off_idx[0].size)

    resid = Y - X @ state.B - state.G
    theta_raw = spectral.sqrt_precision @ state.G

    def target(Mmat):
        M_inv = solve_triangular(Mmat, np.eye(k), lower=False)
        rn = ((resid @ M_inv) ** 2).sum(axis=0)
        tn = ((theta_raw @ M_inv) ** 2).sum(axis=0)
        return _loglik_gprior(rn, tn, state.R, np.diag(Mmat), n) \
            + _log_M_prior(Mmat, config.v, config.Sigma0)

    current = target(M)
    if not np.isfinite(current):
        raise RuntimeError(f"non-finite log target at current state: M={M!r}, R={state.R!r}")
    proposed = target(prop)
    log_ratio = proposed - current + float(np.sum(np.log(prop[diag_idx]) - np.log(M[diag_idx])))
    if np.isfinite(log_ratio) and np.log(rng.uniform()) < log_ratio:
        return prop, True
    return M, False


def mh_update_R(state, Y, X, config, rng, spectral=None):
    """Metropolis move of R: logit-scale random walk with its Jacobian term."""
    spectral = spectral if spectral is not None else spectral_decompose(config.precision)
    n = Y.shape[0]
    r = state.R
    z = rng.standard_normal(r.shape[0])
    prop = expit(np.log(r) - np.log1p(-r) + config.s3 * z)
    prop = np.clip(prop, _R_FLOOR, 1.0 - _R_FLOOR)

    resid_norms, theta_norms = _column_norms(state, Y, X, spectral.sqrt_precision)
    M_diag = np.diag(state.M)

    def target(rv):
        return _loglik_gprior(resid_norms, theta_norms, rv, M_diag, n) \
            + pc_log_density(rv, config.lambda_R, spectral.Lambda)

    current = target(r)
    if not np.isfinite(current):
        raise RuntimeError(f"non-finite log target at current state: M={state.M!r}, R={r!r}")
    proposed = target(prop)
    log_ratio = proposed - current \
        + float(np.sum(np.log(prop * (1.0 - prop)) - np.log(r * (1.0 - r))))
    if np.isfinite(log_ratio) and np.log(rng.uniform()) < log_ratio:
        return prop, True
    return r, False


def default_init(config, Y, X, rng):
    """Starting state: OLS coefficients, zero field, factored Sigma0, mid R."""
    B0 = np.linalg.lstsq(X, Y, rcond=None)[0]
    G0 = np.zeros_like(Y)
    M0 = _chol_upper(config.Sigma0)
    r0 = rng.uniform(0.25, 0.75, size=config.k)
    return ChainState(B=B0, G=G0, M=M0, R=r0)


def _snapshot(state, save_G):
    return ChainState(
        B=state.B.copy(),
        G=state.G.copy() if save_G else None,
        M=state.M.copy(),
        R=state.R.copy(),
    )


def run_chain(config, Y, X, init=None, rng=None, seed_label=None):
    """One chain of the four-block sweep; returns thinned post-burn-in draws.

    Aborts with the offending state if any update produces non-finite values.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(X))):
        raise ValueError("Y and X must be finite")
    rng = np.random.default_rng(rng)
    spectral = spectral_decompose(config.precision)
    chol_XtX = np.linalg.cholesky(X.T @ X)
    projection = projected_spectral(config.precision, X) if config.collapse_B else None
    state = init if init is not None else default_init(config, Y, X, rng)
    state.validate()

    t0 = time.perf_counter()
    accept_M = accept_R = 0
    draws = []
    for t in range(config.iterations):
        if config.collapse_B:
            state.B = collapsed_update_beta(state, Y, X, projection, rng)
        else:
            state.B = gibbs_update_beta(state, Y, X, chol_XtX, rng,
                                        config.beta_prior_precision)
        state.G = gibbs_update_gamma(state, Y, X, spectral, rng)
        state.M, a_M = mh_update_M(state, Y, X, config, rng, spectral)
        state.R, a_R = mh_update_R(state, Y, X, config, rng, spectral)
        accept_M += a_M
        accept_R += a_R
        if not (np.all(np.isfinite(state.B)) and np.all(np.isfinite(state.G))):
            raise RuntimeError(
                f"non-finite state at sweep {t}: B={state.B!r}, M={state.M!r}, R={state.R!r}")
        if t >= config.burn_in and (t - config.burn_in + 1) % config.thin == 0:
            draws.append(_snapshot(state, config.save_G))
    return ChainOutput(
        draws=draws,
        accept_M=accept_M / config.iterations,
        accept_R=accept_R / config.iterations,
        seed=seed_label,
        wall_time=time.perf_counter() - t0,
    )


def save_draws_csv(output, path):
    """Write a chain's draws as CSV, one row per saved sweep.

    Columns: B_i_j for every design-row/outcome pair, the upper entries
    M_i_j, the proportions R_j, and G_i_j when spatial effects were saved.
    """
    if not output.draws:
        raise ValueError("chain output holds no draws")
    first = output.draws[0]
    q, k = first.B.shape
    cols = {}
    B = np.stack([d.B for d in output.draws])
    for i in range(q):
        for j in range(k):
            cols[f"B_{i}_{j}"] = B[:, i, j]
    M = np.stack([d.M for d in output.draws])
    for i in range(k):
        for j in range(i, k):
            cols[f"M_{i}_{j}"] = M[:, i, j]
    R = np.stack([d.R for d in output.draws])
    for j in range(k):
        cols[f"R_{j}"] = R[:, j]
    if first.G is not None:
        G = np.stack([d.G for d in output.draws])
        for i in range(G.shape[1]):
            for j in range(k):
                cols[f"G_{i}_{j}"] = G[:, i, j]
    pd.DataFrame(cols).to_csv(path, index=False)


def load_draws_csv(path):
    """Read draws written by save_draws_csv back into ChainState objects."""
    frame = pd.read_csv(path)
    b_cols = [c for c in frame.columns if c.startswith("B_")]
    r_cols = [c for c in frame.columns if c.startswith("R_")]
    g_cols = [c for c in frame.columns if c.startswith("G_")]
    k = len(r_cols)
    q = len(b_cols) // k
    n = len(g_cols) // k if g_cols else 0
    states = []
    for _, row in frame.iterrows():
        B = np.array([[row[f"B_{i}_{j}"] for j in range(k)] for i in range(q)])
        M = np.zeros((k, k))
        for i in range(k):
            for j in range(i, k):
                M[i, j] = row[f"M_{i}_{j}"]
        R = np.array([row[f"R_{j}"] for j in range(k)])
        G = None
        if g_cols:
            G = np.array([[row[f"G_{i}_{j}"] for j in range(k)] for i in range(n)])
        states.append(ChainState(B=B, G=G, M=M, R=R))
    return states


def run_chains(config, Y, X, rng=None):
    """Independent chains from spawned seeds with overdispersed R starts."""
    if rng is None:
        root = np.random.SeedSequence(config.seed)
    elif isinstance(rng, np.random.SeedSequence):
        root = rng
    else:
        root = np.random.SeedSequence(rng)
    outputs = []
    for child in root.spawn(config.chain_count):
        out = run_chain(config, Y, X, init=None, rng=np.random.default_rng(child),
                        seed_label=f"{child.entropy}:{child.spawn_key}")
        outputs.append(out)
    return outputs
