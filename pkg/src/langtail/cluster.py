"""K-means and Ward agglomerative clustering with multi-granularity truncation.

Conventions pinned here (and by the oracle tests):
  - Ward merge cost is the raw ESS increase
    delta(a, b) = n_a * n_b / (n_a + n_b) * ||mu_a - mu_b||^2 (no square root).
  - Ties break on the smallest (left_node, right_node) id pair, left < right,
    with new nodes numbered n_leaves + merge_index.
  - k-means uses greedy farthest-point seeding from a seeded PRNG; empty
    clusters are re-seeded at the point farthest from its centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import make_rng


@dataclass
class Dendrogram:
    """Ward merge tree: leaves are 0..n-1, merge i creates node n_leaves + i."""

    n_leaves: int
    merges: list[tuple[int, int, float, int]]

    def __post_init__(self):
        if len(self.merges) != self.n_leaves - 1:
            raise ShapeError(
                f"dendrogram with {self.n_leaves} leaves needs {self.n_leaves - 1} merges, "
                f"got {len(self.merges)}"
            )


def check_granularities(levels) -> list[int]:
    levels = [int(k) for k in levels]
    if not levels:
        raise ConfigError("granularity set is empty")
    if any(k < 1 for k in levels):
        raise ConfigError(f"granularities must be >= 1, got {levels}")
    if any(a >= b for a, b in zip(levels[1:], levels)):
        raise ConfigError(f"granularities must be strictly descending, got {levels}")
    return levels


def kmeans(X, k: int, seed: int = 0, max_iters: int = 100):
    """Lloyd's algorithm with farthest-point init.

    Returns (centroids (k, C), assignments (n,), inertia_history).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"k={k} out of range for {n} rows")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")

    centroids = X[_farthest_point_seeds(X, k, seed)].copy()
    assign = np.zeros(n, dtype=np.int64)
    history = []
    for _ in range(max_iters):
        d2 = _sq_dists(X, centroids)
        new_assign = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), new_assign].sum())
        history.append(inertia)

        counts = np.bincount(new_assign, minlength=k)
        if np.any(counts == 0):
            # re-seed each empty cluster at the currently worst-fit point
            worst = d2[np.arange(n), new_assign]
            for c in np.flatnonzero(counts == 0):
                far = int(np.argmax(worst))
                centroids[c] = X[far]
                worst[far] = -1.0
            continue

        if history[:-1] and np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for c in range(k):
            centroids[c] = X[assign == c].mean(axis=0)
    return centroids, assign, history


def _farthest_point_seeds(X, k, seed):
    rng = make_rng(seed, "kmeans-init")
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    min_d2 = _sq_dists(X, X[chosen[-1]][None, :])[:, 0]
    while len(chosen) < k:
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, _sq_dists(X, X[nxt][None, :])[:, 0])
    return np.array(chosen, dtype=np.int64)


def _sq_dists(X, C):
    d2 = (
        (X * X).sum(axis=1)[:, None]
        - 2.0 * X @ C.T
        + (C * C).sum(axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def ward_cost(size_a, mu_a, size_b, mu_b) -> float:
    diff = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    return float(size_a * size_b / (size_a + size_b) * (diff @ diff))


def ward_tree(X) -> Dendrogram:
    """Greedy Ward agglomeration with the documented lexicographic tie-break.

    O(n^2) memory, O(n^2) work per merge; fine for desk-scale superpoint counts.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ConfigError(f"ward_tree needs >= 2 rows, got {n}")

    mus = X.copy()
    sizes = np.ones(n, dtype=np.float64)
    node_ids = np.arange(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)

    cost = _pairwise_ward_costs(mus, sizes)
    cost = np.minimum(cost, cost.T)  # summation order skews the triangles by 1 ulp
    np.fill_diagonal(cost, np.inf)

    merges = []
    for step in range(n - 1):
        best = np.min(cost)
        ii, jj = np.nonzero(cost == best)
        # candidate pairs as (min node id, max node id); pick lexicographic smallest
        pairs = sorted({
            (min(node_ids[a], node_ids[b]), max(node_ids[a], node_ids[b]),
             min(a, b), max(a, b))
            for a, b in zip(ii, jj)
        })
        left, right, a, b = pairs[0]
        if node_ids[a] != left:
            a, b = b, a

        new_size = sizes[a] + sizes[b]
        new_mu = (sizes[a] * mus[a] + sizes[b] * mus[b]) / new_size
        merges.append((int(left), int(right), float(best), int(new_size)))

        # slot a becomes the merged cluster, slot b dies
        mus[a] = new_mu
        sizes[a] = new_size
        node_ids[a] = n + step
        active[b] = False
        cost[b, :] = np.inf
        cost[:, b] = np.inf

        others = np.flatnonzero(active)
        others = others[others != a]
        if others.size:
            diff = mus[others] - new_mu
            d2 = (diff * diff).sum(axis=1)
            c = sizes[others] * new_size / (sizes[others] + new_size) * d2
            cost[a, others] = c
            cost[others, a] = c
        cost[a, a] = np.inf
    return Dendrogram(n_leaves=n, merges=merges)


def _pairwise_ward_costs(mus, sizes):
    d2 = _sq_dists(mus, mus)
    w = sizes[:, None] * sizes[None, :] / (sizes[:, None] + sizes[None, :])
    return w * d2


def cut_tree(d: Dendrogram, k: int) -> np.ndarray:
    """Partition into exactly k clusters by undoing the last k-1 merges.

    Labels are densified to [0, k) in order of each cluster's smallest leaf.
    """
    if k < 1 or k > d.n_leaves:
        raise ConfigError(f"k={k} out of range for {d.n_leaves} leaves")
    parent = np.arange(d.n_leaves + len(d.merges), dtype=np.int64)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for step in range(d.n_leaves - k):
        left, right, _, _ = d.merges[step]
        new = d.n_leaves + step
        parent[find(left)] = new
        parent[find(right)] = new

    roots = np.array([find(i) for i in range(d.n_leaves)])
    labels = np.empty(d.n_leaves, dtype=np.int64)
    seen = {}
    for i, r in enumerate(roots):
        if r not in seen:
            seen[r] = len(seen)
        labels[i] = seen[r]
    return labels


def cluster_means(X, labels, k: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    return sums / counts[:, None]


def multi_granularity_labels(X, levels, seed: int = 0, sample_cap: int = 30000):
    """Cut one Ward tree at every granularity level.

    Returns a list of (k, centroids (k, C), labels (n,)) in the given level
    order. Above sample_cap rows, the tree is built on a uniform subsample and
    held-out rows are assigned to the nearest cut-level centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    levels = check_granularities(levels)
    n = X.shape[0]
    if max(levels) > n:
        raise ConfigError(f"granularity {max(levels)} exceeds {n} rows")

    if n > sample_cap:
        rng = make_rng(seed, "ward-subsample")
        sampled = np.sort(rng.choice(n, size=sample_cap, replace=False))
    else:
        sampled = np.arange(n)

    tree = ward_tree(X[sampled])
    out = []
    for k in levels:
        sub_labels = cut_tree(tree, k)
        centroids = cluster_means(X[sampled], sub_labels, k)
        if sampled.size == n:
            labels = sub_labels
        else:
            labels = np.argmin(_sq_dists(X, centroids), axis=1)
            labels[sampled] = sub_labels
        out.append((k, centroids, labels))
    return out
