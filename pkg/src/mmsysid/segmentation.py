"""Feature-space oversegmentation and the material grouping losses."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import linkage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

LN10 = math.log(10.0)
DEFAULT_ALPHA = 20.0
DEFAULT_EPS = 1e-9
DEFAULT_NEIGHBOURS = 20
DEFAULT_GRANULARITY = 8
_DENSE_LIMIT = 6000


@dataclass
class FeatureNeighborhood:
    indices: np.ndarray   # (N, k)
    weights: np.ndarray   # (N, k), rows sum to 1


# ---------------------------------------------------------------- oversegmentation

def _single_linkage_edges(X):
    """Merge heights and endpoints of a single-linkage (minimum spanning) tree."""
    n = len(X)
    if n <= _DENSE_LIMIT:
        Z = linkage(X, method="single")
        return Z
    k = min(n - 1, 30)
    dist, nbr = cKDTree(X).query(X, k=k + 1)
    rows = np.repeat(np.arange(n), k)
    # +1 keeps zero-distance pairs as explicit edges; a constant shift leaves the MST unchanged
    g = coo_matrix((dist[:, 1:].ravel() + 1.0, (rows, nbr[:, 1:].ravel())), shape=(n, n)).tocsr()
    mst = minimum_spanning_tree(g.maximum(g.T)).tocoo()
    order = np.argsort(mst.data, kind="stable")
    Z = np.zeros((len(order), 4))
    Z[:, 2] = mst.data[order] - 1.0
    Z[:, 0] = mst.row[order]
    Z[:, 1] = mst.col[order]
    return Z


def _cut(X, n_clusters, Z):
    """Labels after merging every tree edge except the largest ``n_clusters - 1``."""
    n = len(X)
    if len(X) <= _DENSE_LIMIT:
        from scipy.cluster.hierarchy import fcluster
        return fcluster(Z, n_clusters, criterion="maxclust") - 1
    keep = len(Z) - (n_clusters - 1)
    edges = Z[:keep]
    g = coo_matrix((np.ones(len(edges)), (edges[:, 0].astype(int), edges[:, 1].astype(int))), shape=(n, n))
    return connected_components(g, directed=False)[1]


def _absorb_small(X, labels, min_size):
    labels = labels.copy()
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        if len(ids) <= 1:
            return labels
        small = ids[counts < min_size]
        if small.size == 0:
            return labels
        # smallest first; ties by label for determinism
        order = np.lexsort((small, counts[np.isin(ids, small)]))
        s = small[order[0]]
        members = np.flatnonzero(labels == s)
        others = np.flatnonzero(labels != s)
        d = ((X[members][:, None, :] - X[others][None, :, :]) ** 2).sum(-1)
        j = others[np.unravel_index(np.argmin(d), d.shape)[1]]
        labels[members] = labels[j]


def _relabel(labels):
    """Contiguous ids ordered by each segment's lowest particle index."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = {int(labels[first[o]]): i for i, o in enumerate(order)}
    return np.array([remap[int(l)] for l in labels], dtype=np.int32)


def oversegment(z_D, z_A=None, target_granularity: int = DEFAULT_GRANULARITY,
                min_fraction: float = 0.25) -> np.ndarray:
    """Single-linkage clustering of concatenated features.

    The tree is cut at the widest relative gap that leaves between ``target``
    and ``2 * target`` clusters; clusters smaller than ``min_fraction`` of the
    mean size at ``2 * target`` are then absorbed into their nearest neighbour.
    """
    X = np.asarray(z_D, dtype=np.float64)
    if z_A is not None:
        X = np.concatenate([X, np.asarray(z_A, dtype=np.float64)], axis=1)
    n = len(X)
    if target_granularity < 1:
        raise ValueError("target_granularity must be >= 1")
    if n == 0:
        return np.zeros(0, dtype=np.int32)
    spread = X.max(axis=0) - X.min(axis=0) if n else np.zeros(1)
    if n == 1 or not np.any(spread > 0):
        warnings.warn("features are all identical; returning a single segment", RuntimeWarning, stacklevel=2)
        return np.zeros(n, dtype=np.int32)
    Z = _single_linkage_edges(X)
    heights = np.sort(Z[:, 2])
    n_positive = int(np.count_nonzero(heights > 0))
    c_max = n_positive + 1
    lo = min(target_granularity, c_max)
    hi = min(2 * target_granularity, c_max)
    best_c, best_gap = lo, -np.inf
    tiny = 1e-12 * heights[-1]
    m = len(heights)
    for c in range(lo, hi + 1):
        above = heights[m - c + 1] if c >= 2 else np.inf    # smallest edge left cut
        below = heights[m - c] if m - c >= 0 else 0.0         # largest edge merged
        if c == 1:
            gap = 0.0
        else:
            gap = (above + tiny) / (below + tiny)
        if gap > best_gap:
            best_gap, best_c = gap, c
    labels = _cut(X, best_c, Z)
    min_size = max(2, int(math.ceil(min_fraction * n / (2 * target_granularity))))
    labels = _absorb_small(X, labels, min_size)
    return _relabel(labels)


# ---------------------------------------------------------------- neighbourhoods

def knn_neighbourhoods(z_D, k: int = DEFAULT_NEIGHBOURS) -> np.ndarray:
    """Indices of the ``k`` nearest other particles in feature space."""
    Z = np.asarray(z_D, dtype=np.float64)
    n = len(Z)
    k = min(k, n - 1)
    if k < 1:
        raise ValueError("need at least two particles for neighbourhoods")
    _, nbr = cKDTree(Z).query(Z, k=k + 1)
    nbr = np.asarray(nbr).reshape(n, k + 1)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = nbr[i][nbr[i] != i]
        out[i] = row[:k]
    return out


def similarity_weights(z_D, neighbours, alpha: float = DEFAULT_ALPHA, eps: float = DEFAULT_EPS) -> np.ndarray:
    Z = np.asarray(z_D, dtype=np.float64)
    nbr = np.asarray(neighbours, dtype=np.int64)
    d2 = ((Z[:, None, :] - Z[nbr]) ** 2).sum(-1)
    raw = np.exp(-alpha * d2) + eps
    return raw / raw.sum(axis=1, keepdims=True)


def build_neighbourhood(z_D, k: int = DEFAULT_NEIGHBOURS, alpha: float = DEFAULT_ALPHA,
                        eps: float = DEFAULT_EPS) -> FeatureNeighborhood:
    nbr = knn_neighbourhoods(z_D, k)
    return FeatureNeighborhood(nbr, similarity_weights(z_D, nbr, alpha, eps))


# ---------------------------------------------------------------- losses

def _as_log10(params):
    """(S, 2) array of [log10_E, log10_rho] from segments or an array."""
    if isinstance(params, np.ndarray):
        p = params
    else:
        p = np.array([[s.log10_E, s.log10_rho] for s in params])
    return np.asarray(p, dtype=np.float64).reshape(-1, 2)


def pair_weight_matrix(labels, neighbourhood: FeatureNeighborhood, n_segments: int) -> np.ndarray:
    """``W[s, t]`` = total weight of neighbour pairs (i in s, j in t)."""
    labels = np.asarray(labels, dtype=np.int64)
    src = np.repeat(labels, neighbourhood.indices.shape[1])
    dst = labels[neighbourhood.indices.ravel()]
    W = np.zeros((n_segments, n_segments))
    np.add.at(W, (src, dst), neighbourhood.weights.ravel())
    return W


class GroupingLoss:
    """Similarity + weighted variance of natural-log parameters, with gradient.

    Segment labels must be contiguous positions ``0..S-1`` into the parameter
    array. Everything reduces to per-segment sums, so the cost does not grow
    with the particle count after construction.
    """

    def __init__(self, labels, neighbourhood: FeatureNeighborhood, n_segments: int, w_v: float = 1.0):
        labels = np.asarray(labels, dtype=np.int64)
        self.n = len(labels)
        self.W = pair_weight_matrix(labels, neighbourhood, n_segments)
        self.counts = np.bincount(labels, minlength=n_segments).astype(np.float64)
        self.w_v = float(w_v)

    def similarity(self, params) -> float:
        p = _as_log10(params) * LN10
        diff2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)
        return float((self.W * diff2).sum() / self.n)

    def variance(self, params) -> float:
        p = _as_log10(params) * LN10
        mean = (self.counts[:, None] * p).sum(0) / self.n
        return float((self.counts[:, None] * (p - mean) ** 2).sum() / self.n)

    def value(self, params) -> float:
        return self.similarity(params) + self.w_v * self.variance(params)

    def gradient(self, params) -> np.ndarray:
        """d L_g / d [log10_E, log10_rho] per segment, shape (S, 2)."""
        p = _as_log10(params) * LN10
        Wsym = self.W + self.W.T
        g_s = 2.0 * (Wsym.sum(1)[:, None] * p - Wsym @ p) / self.n
        mean = (self.counts[:, None] * p).sum(0) / self.n
        g_v = 2.0 * self.counts[:, None] * (p - mean) / self.n
        return (g_s + self.w_v * g_v) * LN10


def similarity_loss(labels, params, neighbourhood: FeatureNeighborhood) -> float:
    """Direct per-particle evaluation (reference form of the aggregated loss)."""
    labels = np.asarray(labels, dtype=np.int64)
    p = _as_log10(params)[labels] * LN10
    diff2 = ((p[:, None, :] - p[neighbourhood.indices]) ** 2).sum(-1)
    return float((neighbourhood.weights * diff2).sum() / len(labels))


def variance_loss(labels, params) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("variance loss needs at least one particle")
    p = _as_log10(params)[labels] * LN10
    return float(p.var(axis=0).sum())


def grouping_loss(L_s: float, L_v: float, w_v: float = 1.0) -> float:
    return float(L_s + w_v * L_v)
