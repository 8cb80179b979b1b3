"""Simulation of spatially confounded multivariate areal datasets.

The generator draws covariates X1 with spatially correlated columns, a
spatial confounder Z that loads on X1, and outcomes Y that combine the
covariate effects, the confounder, and coregionalized noise whose spatial
share is controlled per outcome. Throughout, vec() stacks columns
(Fortran order) and Kronecker covariances are column-block (x) spatial-block.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd

from .spatial import ScaledPrecision


@dataclass(frozen=True)
class GaussianSpec:
    """A dense multivariate normal: mean vector and covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        np.linalg.cholesky(self.cov)


@dataclass(eq=False)
class GenerationParams:
    """Fixed unknowns of the data-generation model.

    beta0, delta0 are k-vectors of intercepts; B1, D1 are p x k slope
    matrices for the outcome and confounder; mu is the p-vector of
    covariate means; A (k x k) and C (p x p) are invertible mixing
    matrices; rho holds the per-outcome spatial proportions in [0, 1];
    V_phi is the scaled generation spatial structure.
    """

    beta0: np.ndarray
    B1: np.ndarray
    delta0: np.ndarray
    D1: np.ndarray
    mu: np.ndarray
    A: np.ndarray
    C: np.ndarray
    rho: np.ndarray
    V_phi: ScaledPrecision = field(repr=False)

    def __post_init__(self):
        self.beta0 = np.atleast_1d(np.asarray(self.beta0, dtype=float))
        self.delta0 = np.atleast_1d(np.asarray(self.delta0, dtype=float))
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        self.B1 = np.atleast_2d(np.asarray(self.B1, dtype=float))
        self.D1 = np.atleast_2d(np.asarray(self.D1, dtype=float))
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        k, p = self.k, self.p
        if self.delta0.shape != (k,) or self.rho.shape != (k,):
            raise ValueError("delta0 and rho must have length k")
        if self.B1.shape != (p, k) or self.D1.shape != (p, k):
            raise ValueError("B1 and D1 must be p x k")
        if self.A.shape != (k, k) or self.C.shape != (p, p):
            raise ValueError("A must be k x k and C p x p")
        if ((self.rho < 0) | (self.rho > 1)).any():
            raise ValueError("spatial proportions must lie in [0, 1]")
        for name, mat in (("A", self.A), ("C", self.C)):
            if not np.isfinite(np.linalg.cond(mat)):
                raise ValueError(f"{name} is singular")

    @property
    def k(self):
        return self.beta0.shape[0]

    @property
    def p(self):
        return self.mu.shape[0]

    @property
    def n(self):
        return self.V_phi.precision.shape[0]

    @property
    def P(self):
        return np.diag(self.rho)

    @property
    def B(self):
        """(p+1) x k coefficient matrix of the outcome equation, intercept row first."""
        return np.vstack([self.beta0, self.B1])

    @property
    def D(self):
        """(p+1) x k coefficient matrix of the confounder equation."""
        return np.vstack([self.delta0, self.D1])

    @cached_property
    def cov_cholesky(self):
        """Lower Cholesky factor of the spatial covariance V_phi."""
        return np.linalg.cholesky(np.linalg.inv(self.V_phi.precision))


@dataclass(frozen=True)
class Dataset:
    """One simulated dataset.

    Z is the latent confounder, retained only for oracle evaluation;
    analysis models must consume (X, Y) alone.
    """

    X1: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray


def generate_dataset(params, rng, X1=None):
    """Draw one dataset from the generation model.

    Passing X1 holds the covariates fixed and redraws only (Z, Y), which is
    what replicate-conditional evaluations need. rng may be a seed or a
    numpy Generator.
    """
    rng = np.random.default_rng(rng)
    n, k, p = params.n, params.k, params.p
    L = params.cov_cholesky
    ones = np.ones((n, 1))
    if X1 is None:
        E_X = L @ rng.standard_normal((n, p))
        X1 = ones @ params.mu[None, :] + E_X @ params.C
    else:
        X1 = np.asarray(X1, dtype=float)
        if X1.shape != (n, p):
            raise ValueError(f"fixed X1 must be {n} x {p}")
    sqrt_rho = np.sqrt(params.rho)
    E_Z = (L @ rng.standard_normal((n, k))) * sqrt_rho
    Z = ones @ params.delta0[None, :] + X1 @ params.D1 + E_Z @ params.A
    E_Y = rng.standard_normal((n, k)) * np.sqrt(1.0 - params.rho)
    Y = ones @ params.beta0[None, :] + X1 @ params.B1 + Z + E_Y @ params.A
    X = np.column_stack([np.ones(n), X1])
    return Dataset(X1=X1, X=X, Y=Y, Z=Z)


def marginal_generation_density(params, X):
    """Marginal law of vec(Y) given the design X, with Z integrated out.

    mean = vec(X(B + D)); cov = A^T P A (x) V_phi + A^T (I - P) A (x) I_n.
    """
    X = np.asarray(X, dtype=float)
    n = params.n
    if X.shape != (n, params.p + 1):
        raise ValueError(f"design must be {n} x {params.p + 1}")
    mean = (X @ (params.B + params.D)).flatten(order="F")
    W_V = np.linalg.inv(params.V_phi.precision)
    A, P = params.A, params.P
    cov = np.kron(A.T @ P @ A, W_V) + np.kron(A.T @ (np.eye(params.k) - P) @ A, np.eye(n))
    return GaussianSpec(mean=mean, cov=0.5 * (cov + cov.T))


def unconditional_estimand(params):
    """Covariate-outcome association with the confounder loading absorbed: F = B + D."""
    return params.B + params.D


def save_dataset_csv(dataset, path, include_z=True):
    """Write a dataset as CSV with columns region, x1..xp, y1..yk[, z1..zk]."""
    n, p = dataset.X1.shape
    k = dataset.Y.shape[1]
    cols = {"region": np.arange(n)}
    for j in range(p):
        cols[f"x{j + 1}"] = dataset.X1[:, j]
    for j in range(k):
        cols[f"y{j + 1}"] = dataset.Y[:, j]
    if include_z:
        for j in range(k):
            cols[f"z{j + 1}"] = dataset.Z[:, j]
    pd.DataFrame(cols).to_csv(path, index=False)


def load_dataset_csv(path):
    """Read a dataset CSV written by save_dataset_csv (z columns optional)."""
    df = pd.read_csv(path)
    x_cols = sorted((c for c in df.columns if c.startswith("x")), key=lambda c: int(c[1:]))
    y_cols = sorted((c for c in df.columns if c.startswith("y")), key=lambda c: int(c[1:]))
    z_cols = sorted((c for c in df.columns if c.startswith("z")), key=lambda c: int(c[1:]))
    if not x_cols or not y_cols:
        raise ValueError(f"{path}: need x* and y* columns")
    X1 = df[x_cols].to_numpy(dtype=float)
    Y = df[y_cols].to_numpy(dtype=float)
    Z = df[z_cols].to_numpy(dtype=float) if z_cols else np.full_like(Y, np.nan)
    X = np.column_stack([np.ones(len(df)), X1])
    return Dataset(X1=X1, X=X, Y=Y, Z=Z)
