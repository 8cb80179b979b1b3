"""Areal adjacency graphs and scaled spatial precision matrices.

Builds the neighborhood structure of n regions, the CAR and SAR precision
matrices derived from it, the scaling that gives the implied covariance a
unit geometric-mean marginal variance, and the spectral objects (plain and
design-projected) that the closed-form estimators and the sampler consume.
"""

from dataclasses import dataclass
from importlib import resources

import numpy as np


@dataclass(frozen=True)
class AdjacencyGraph:
    """Neighborhood structure of n regions.

    Attributes
    ----------
    n : int
        Region count.
    edges : frozenset of (int, int)
        Unordered region pairs, stored as sorted tuples.
    W : ndarray, shape (n, n)
        Symmetric 0/1 adjacency matrix with zero diagonal.
    D_W : ndarray, shape (n, n)
        Diagonal matrix of neighbor counts.
    """

    n: int
    edges: frozenset
    W: np.ndarray
    D_W: np.ndarray


@dataclass(frozen=True)
class ScaledPrecision:
    """A scaled spatial precision matrix and its scaling constant.

    precision = c * unscaled, with c the geometric mean of the marginal
    variances of the unscaled structure, so that the scaled covariance has
    unit geometric-mean diagonal.
    """

    kind: str
    alpha: float
    c: float
    precision: np.ndarray
    covariance_diag: np.ndarray


@dataclass(frozen=True)
class SpectralBasis:
    """Eigendecomposition of a precision matrix.

    precision = Q diag(Lambda) Q^T with Q orthogonal and Lambda > 0.
    sqrt_precision and sqrt_covariance are the symmetric square roots.
    """

    Q: np.ndarray
    Lambda: np.ndarray
    sqrt_precision: np.ndarray
    sqrt_covariance: np.ndarray


@dataclass(frozen=True)
class ProjectedSpectral:
    """Design-projected spectral objects for a precision matrix.

    With H the hat matrix of the design X and W_cov the covariance
    (inverse precision), factor W_cov^{1/2} (I - H) W_cov^{1/2} = Q* K Q*^T
    and set U = W_cov^{1/2} Q*. Then U^{-T} K U^{-1} = I - H and
    U^{-T} U^{-1} = precision. K_star flags the strictly positive
    eigenvalues; exactly rank(X) of the k_i vanish.
    """

    H: np.ndarray
    U: np.ndarray
    U_inv: np.ndarray
    K: np.ndarray
    K_star: np.ndarray


def build_adjacency(edge_list, n):
    """Build an AdjacencyGraph from an iterable of region-id pairs.

    Duplicate edges are deduplicated silently. Raises ValueError for ids
    outside [0, n), self-loops, isolated regions, or a disconnected graph.
    """
    W = np.zeros((n, n))
    edges = set()
    for i, j in edge_list:
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) has a region id outside [0, {n})")
        if i == j:
            raise ValueError(f"self-loop at region {i}")
        edges.add((min(i, j), max(i, j)))
    for i, j in edges:
        W[i, j] = W[j, i] = 1.0
    deg = W.sum(axis=1)
    if (deg == 0).any():
        lonely = int(np.flatnonzero(deg == 0)[0])
        raise ValueError(f"region {lonely} has no neighbors")
    # connectivity: breadth-first search from region 0
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        v = stack.pop()
        for u in np.flatnonzero(W[v]):
            if not seen[u]:
                seen[u] = True
                stack.append(int(u))
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise ValueError(f"graph is disconnected (region {missing} unreachable from 0)")
    return AdjacencyGraph(n=n, edges=frozenset(edges), W=W, D_W=np.diag(deg))


def load_adjacency(path):
    """Read an adjacency file: first line "n <count>", then one "i j" pair per line."""
    with open(path) as f:
        tokens = f.read().split()
    if len(tokens) < 2 or tokens[0] != "n":
        raise ValueError(f"{path}: expected first line 'n <count>'")
    n = int(tokens[1])
    body = tokens[2:]
    if len(body) % 2:
        raise ValueError(f"{path}: odd number of edge ids")
    pairs = list(zip(map(int, body[0::2]), map(int, body[1::2])))
    return build_adjacency(pairs, n)


def bundled_california_graph():
    """Load the packaged 58-county California adjacency."""
    ref = resources.files("mbym2.data").joinpath("ca_counties.txt")
    with resources.as_file(ref) as path:
        return load_adjacency(path)


def _check_alpha(alpha):
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def car_precision(graph, alpha):
    """Unscaled conditionally autoregressive precision D_W - alpha * W."""
    _check_alpha(alpha)
    return graph.D_W - alpha * graph.W


def sar_precision(graph, alpha):
    """Unscaled simultaneously autoregressive precision.

    Uses the row-normalized adjacency Wt (rows sum to one) and returns
    (I - alpha Wt)^T (I - alpha Wt), the precision of the simultaneous
    errors model, symmetric positive definite by construction.
    """
    _check_alpha(alpha)
    deg = np.diag(graph.D_W)
    Wt = graph.W / deg[:, None]
    A = np.eye(graph.n) - alpha * Wt
    return A.T @ A


def scale_precision(unscaled, kind="car", alpha=np.nan):
    """Scale a precision so its covariance has unit geometric-mean diagonal.

    c is the geometric mean of diag(unscaled^{-1}); the returned precision is
    c * unscaled. Raises ValueError if the input is not symmetric positive
    definite.
    """
    unscaled = np.asarray(unscaled, dtype=float)
    if not np.allclose(unscaled, unscaled.T, atol=1e-10):
        raise ValueError("precision must be symmetric")
    try:
        np.linalg.cholesky(unscaled)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(unscaled)[0])
        raise ValueError(f"precision is not positive definite (min eigenvalue {smallest:.3e})")
    cov = np.linalg.inv(unscaled)
    c = float(np.exp(np.mean(np.log(np.diag(cov)))))
    return ScaledPrecision(
        kind=kind,
        alpha=float(alpha),
        c=c,
        precision=c * unscaled,
        covariance_diag=np.diag(cov) / c,
    )


def spectral_decompose(precision):
    """Eigendecompose a ScaledPrecision into a SpectralBasis."""
    P = precision.precision if isinstance(precision, ScaledPrecision) else np.asarray(precision)
    lam, Q = np.linalg.eigh(P)
    if lam[0] <= 0:
        raise ValueError(f"precision has a nonpositive eigenvalue {lam[0]:.3e}")
    sqrt_prec = (Q * np.sqrt(lam)) @ Q.T
    sqrt_cov = (Q / np.sqrt(lam)) @ Q.T
    return SpectralBasis(Q=Q, Lambda=lam, sqrt_precision=sqrt_prec, sqrt_covariance=sqrt_cov)


def projected_spectral(precision, X):
    """Design-projected spectral decomposition of a ScaledPrecision.

    Eigenvalues below 1e-9 * max(K) are treated as exact zeros; exactly
    rank(X) of them must vanish. Raises ValueError for rank-deficient X.
    """
    X = np.asarray(X, dtype=float)
    n, q = X.shape
    if np.linalg.matrix_rank(X) < q:
        raise ValueError("design matrix is rank deficient")
    basis = spectral_decompose(precision)
    XtX = X.T @ X
    H = X @ np.linalg.solve(XtX, X.T)
    Wh = basis.sqrt_covariance
    core = Wh @ (np.eye(n) - H) @ Wh
    core = 0.5 * (core + core.T)
    K, Qs = np.linalg.eigh(core)
    K = np.where(K < 1e-9 * K.max(), 0.0, K)
    n_zero = int((K == 0.0).sum())
    if n_zero != q:
        raise ValueError(f"expected {q} zero eigenvalues in projected spectrum, found {n_zero}")
    U = Wh @ Qs
    U_inv = Qs.T @ basis.sqrt_precision
    return ProjectedSpectral(H=H, U=U, U_inv=U_inv, K=K, K_star=(K > 0.0).astype(float))
