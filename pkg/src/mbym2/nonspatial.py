"""Conjugate Bayesian multivariate regression without spatial effects.

Flat prior on the coefficient matrix, inverse-Wishart prior on the error
covariance. The inverse-Wishart convention used throughout the package is
density(Sigma | nu, S) proportional to
|Sigma|^{-(nu+k+1)/2} exp(-tr(S Sigma^{-1})/2),
so Sigma^{-1} ~ Wishart(nu, S^{-1}), E[Sigma^{-1}] = nu S^{-1}, and
E[Sigma] = S/(nu-k-1). The prior (v, v*Sigma0) therefore centers the
precision at Sigma0^{-1}.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


@dataclass(frozen=True)
class NonSpatialPosterior:
    """Exact posterior of the conjugate multivariate regression.

    Sigma | Y ~ IW(v_star, Sigma_star) and
    vec(B) | Sigma, Y ~ N(vec(B_hat), Sigma (x) (X^T X)^{-1}).
    """

    B_hat: np.ndarray
    v_star: float
    Sigma_star: np.ndarray
    XtX_chol: np.ndarray


def default_sigma0(Y, X):
    """Data-driven diagonal prior scale.

    The j-th diagonal entry is the squared residual norm of the j-th
    outcome column after projecting onto the design, divided by
    n - ncol(X). Raises for degenerate (zero-residual) columns or
    n <= ncol(X).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.asarray(X, dtype=float)
    n, q = X.shape
    if n <= q:
        raise ValueError(f"need more rows than design columns (n={n}, ncol={q})")
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    diag = (resid**2).sum(axis=0) / (n - q)
    if (diag <= 1e-12).any():
        raise ValueError("degenerate scale: an outcome column lies in the design span")
    return np.diag(diag)


def fit_nonspatial(Y, X, v, Sigma0):
    """Exact conjugate posterior for (B, Sigma) given outcomes and design."""
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, q = X.shape
    k = Y.shape[1]
    if np.linalg.matrix_rank(X) < q:
        raise ValueError("design matrix is rank deficient")
    if v <= k - 1:
        raise ValueError(f"degrees of freedom v={v} must exceed k-1={k - 1}")
    Sigma0 = np.asarray(Sigma0, dtype=float)
    np.linalg.cholesky(Sigma0)
    XtX = X.T @ X
    L = np.linalg.cholesky(XtX)
    B_hat = solve_triangular(L.T, solve_triangular(L, X.T @ Y, lower=True), lower=False)
    resid = Y - X @ B_hat
    Sigma_star = v * Sigma0 + resid.T @ resid
    return NonSpatialPosterior(B_hat=B_hat, v_star=float(v + n), Sigma_star=Sigma_star, XtX_chol=L)


def sample_inverse_wishart(nu, scale, count, rng):
    """Draws from IW(nu, scale) via the Bartlett decomposition, shape (count, k, k)."""
    rng = np.random.default_rng(rng)
    k = scale.shape[0]
    if nu <= k - 1:
        raise ValueError("inverse-Wishart requires nu > k - 1")
    L_s = np.linalg.cholesky(scale)
    A = np.zeros((count, k, k))
    rows, cols = np.tril_indices(k, -1)
    A[:, rows, cols] = rng.standard_normal((count, rows.size))
    for i in range(k):
        A[:, i, i] = np.sqrt(rng.chisquare(nu - i, size=count))
    # Sigma^{-1} = L_s^{-T} A A^T L_s^{-1}  =>  Sigma = (L_s A^{-T})(L_s A^{-T})^T
    A_inv = np.linalg.inv(A)
    F = L_s[None, :, :] @ np.swapaxes(A_inv, 1, 2)
    return F @ np.swapaxes(F, 1, 2)


def sample_nonspatial(post, count, rng):
    """Exact posterior draws of (B, Sigma), shapes (count, q, k) and (count, k, k)."""
    rng = np.random.default_rng(rng)
    q, k = post.B_hat.shape
    Sigmas = sample_inverse_wishart(post.v_star, post.Sigma_star, count, rng)
    L_sig = np.linalg.cholesky(Sigmas)
    Z = rng.standard_normal((count, q, k))
    # vec var of E = Lx^{-T} Z S is (S^T S) (x) (X^T X)^{-1}; S = chol(Sigma)^T
    Lx_invT_Z = np.linalg.solve(post.XtX_chol.T[None, :, :], Z)
    B = post.B_hat[None, :, :] + Lx_invT_Z @ np.swapaxes(L_sig, 1, 2)
    return B, Sigmas
