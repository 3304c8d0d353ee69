"""Superpoint affinity graph, normalized Laplacian, and frequency-domain
pattern grouping for the global branch.

The graph spans the whole (possibly subsampled) corpus superpoint set.
Eigenvector sign is fixed so each column's largest-magnitude entry is
positive; without this the pattern grouping would not be deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import kmeans
from .errors import ConfigError, DegenerateGraphError, ShapeError


@dataclass
class SpectralBasis:
    U: np.ndarray  # (n, n), columns are eigenvectors
    lam: np.ndarray  # (n,), ascending


@dataclass
class RefinedPatterns:
    V: np.ndarray  # (n, s_prime), column = mean of its assigned eigenvectors
    cluster_of_pattern: np.ndarray  # (n,), original pattern index -> refined cluster


def build_affinity(F, normalize: bool = True) -> np.ndarray:
    """Dense affinity a_ij = exp(-||f_i - f_j||^2) with zero diagonal.

    Rows are L2-normalized first by default so the squared distances stay in
    [0, 4] and the exponential does not collapse to zero.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ConfigError("affinity graph needs at least 2 superpoints")
    if normalize:
        norms = np.linalg.norm(F, axis=1, keepdims=True)
        F = np.divide(F, norms, out=F.copy(), where=norms > 0)
    diff2 = (
        (F * F).sum(axis=1)[:, None] - 2.0 * F @ F.T + (F * F).sum(axis=1)[None, :]
    )
    np.maximum(diff2, 0.0, out=diff2)
    A = np.exp(-diff2)
    np.fill_diagonal(A, 0.0)
    return A


def normalized_laplacian(A) -> np.ndarray:
    """L = D^{-1/2} (D - A) D^{-1/2}; symmetric, eigenvalues in [0, 2]."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"affinity must be square, got {A.shape}")
    deg = A.sum(axis=1)
    if np.any(deg <= 0):
        raise DegenerateGraphError("graph has an isolated node (zero degree)")
    d = 1.0 / np.sqrt(deg)
    L = -A * d[:, None] * d[None, :]
    np.fill_diagonal(L, np.diag(L) + 1.0)
    return 0.5 * (L + L.T)


def eigendecompose(L) -> SpectralBasis:
    """Full symmetric eigendecomposition with ascending eigenvalues and the
    largest-magnitude-entry-positive sign convention."""
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"matrix must be square, got {L.shape}")
    if not np.allclose(L, L.T, atol=1e-10):
        raise ShapeError("matrix is not symmetric")
    lam, U = np.linalg.eigh(L)
    U = U.copy()
    pivots = np.argmax(np.abs(U), axis=0)
    flip = U[pivots, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1.0
    return SpectralBasis(U=U, lam=lam)


def graph_fourier(basis: SpectralBasis, F) -> np.ndarray:
    """Project features into the graph frequency domain: row s is the
    frequency response of pattern u_s."""
    F = np.asarray(F, dtype=np.float64)
    if basis.U.shape[0] != F.shape[0]:
        raise ShapeError(
            f"basis has {basis.U.shape[0]} nodes but features have {F.shape[0]} rows"
        )
    return basis.U.T @ F


def group_patterns(basis: SpectralBasis, F_feq, s_prime: int, seed: int = 0) -> RefinedPatterns:
    """K-means over frequency rows, then average the eigenvectors of each
    cluster into a refined global pattern."""
    F_feq = np.asarray(F_feq, dtype=np.float64)
    n = basis.U.shape[0]
    if F_feq.shape[0] != n:
        raise ShapeError("frequency feature rows must match basis size")
    if s_prime > n:
        raise ConfigError(f"s_prime={s_prime} exceeds {n} patterns")
    _, assign, _ = kmeans(F_feq, s_prime, seed=seed)
    V = np.zeros((n, s_prime))
    for s in range(s_prime):
        members = np.flatnonzero(assign == s)
        if members.size:  # duplicates can starve a cluster despite re-seeding
            V[:, s] = basis.U[:, members].mean(axis=1)
    return RefinedPatterns(V=V, cluster_of_pattern=assign)


def global_superpoint_features(patterns: RefinedPatterns) -> np.ndarray:
    """Rows of V: superpoint i's loading vector over the refined patterns."""
    return patterns.V.copy()
