"""Hierarchical agglomerative clustering of client weight vectors.

Dendrograms use the scipy linkage-matrix layout: row ``i`` is
``[left, right, height, size]`` and creates node ``n + i``. Clusters are
identified by their smallest member index; equal merge distances go to the
pair whose identifiers are lexicographically smallest.
"""

from __future__ import annotations

from itertools import product
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array

from .exceptions import ConfigError, ShapeError, UsageError

METRICS = ("cosine", "euclidean", "manhattan")
LINKAGES = ("single", "complete", "average")

_ZERO_NORM = 1e-12


def pairwise_distances(vectors, metric: str = "cosine") -> np.ndarray:
    """Symmetric distance matrix with an exactly zero diagonal.

    Cosine distance is ``1 - cos(u, v)``; a vector with norm below 1e-12 is
    at distance 1.0 from everything else.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")
    try:
        X = np.asarray(vectors, dtype=np.float64)
    except ValueError:
        raise ShapeError("weight vectors must all have the same length") from None
    if X.ndim != 2:
        raise ShapeError("weight vectors must all have the same length")
    n = X.shape[0]
    if n < 2:
        raise UsageError("need at least two vectors")
    if metric == "cosine":
        G = X @ X.T
        sq = np.diag(G).copy()
        ok = np.sqrt(sq) >= _ZERO_NORM
        safe = np.where(ok, sq, 1.0)
        # sqrt of the product of squared norms keeps cos(v, v) exactly 1
        D = 1.0 - G / np.sqrt(np.outer(safe, safe))
        D[~ok, :] = 1.0
        D[:, ~ok] = 1.0
        np.clip(D, 0.0, 2.0, out=D)
    else:
        # row-wise differences rather than the Gram trick, which loses precision for close points
        D = np.zeros((n, n))
        for i in range(n - 1):
            diff = X[i + 1:] - X[i]
            if metric == "euclidean":
                D[i, i + 1:] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            else:
                D[i, i + 1:] = np.abs(diff).sum(axis=1)
    D = np.triu(D, 1)
    return D + D.T


def _check_distance_matrix(D) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {D.shape}")
    return D


def agglomerative(D, linkage: str = "complete") -> np.ndarray:
    """Bottom-up merging with Lance-Williams distance updates.

    Returns an ``(n - 1, 4)`` linkage matrix.
    """
    if linkage not in LINKAGES:
        raise ConfigError(f"unknown linkage {linkage!r}; expected one of {LINKAGES}")
    D = _check_distance_matrix(D)
    n = D.shape[0]
    # A cluster lives in the row of its smallest member. On a symmetric matrix the
    # row-major argmin is the lexicographically smallest tied pair, i.e. the tie-break.
    M = D.copy()
    np.fill_diagonal(M, np.inf)
    node = list(range(n))
    size = [1] * n
    Z = np.zeros((max(n - 1, 0), 4))
    for step in range(n - 1):
        i, j = divmod(int(M.argmin()), n)
        si, sj = size[i], size[j]
        Z[step] = (min(node[i], node[j]), max(node[i], node[j]), M[i, j], si + sj)
        if linkage == "complete":
            row = np.maximum(M[i], M[j])
        elif linkage == "single":
            row = np.minimum(M[i], M[j])
        else:
            row = (si * M[i] + sj * M[j]) / (si + sj)
        row[i] = row[j] = np.inf
        M[i] = row
        M[:, i] = row
        M[j] = np.inf
        M[:, j] = np.inf
        node[i] = n + step
        size[i] = si + sj
    return Z


def _canonical_labels(groups) -> np.ndarray:
    """Number clusters 0..k-1 by ascending smallest member."""
    n = sum(len(g) for g in groups)
    labels = np.empty(n, dtype=np.intp)
    for cid, g in enumerate(sorted(groups, key=min)):
        labels[list(g)] = cid
    return labels


def cut_k(Z, k: int) -> np.ndarray:
    """Flat partition into exactly ``k`` clusters (undo the last ``k - 1`` merges)."""
    Z = np.asarray(Z)
    n = Z.shape[0] + 1
    if not 1 <= k <= n:
        raise UsageError(f"k must lie in [1, {n}], got {k}")
    members = {i: [i] for i in range(n)}
    for step in range(n - k):
        a, b = int(Z[step, 0]), int(Z[step, 1])
        members[n + step] = members.pop(a) + members.pop(b)
    return _canonical_labels(members.values())


def silhouette(D, labels) -> float:
    """Mean silhouette coefficient; members of singleton clusters score 0."""
    D = _check_distance_matrix(D)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise UsageError("silhouette needs at least two clusters")
    n = D.shape[0]
    masks = [labels == c for c in uniq]
    sizes = np.array([m.sum() for m in masks])
    # row sums of distances into each cluster
    sums = np.stack([D[:, m].sum(axis=1) for m in masks], axis=1)
    own = np.searchsorted(uniq, labels)
    scores = np.zeros(n)
    for i in range(n):
        ci = own[i]
        if sizes[ci] == 1:
            continue
        a = sums[i, ci] / (sizes[ci] - 1)
        others = [sums[i, c] / sizes[c] for c in range(len(uniq)) if c != ci]
        b = min(others)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


class GridResult(NamedTuple):
    metric: str
    linkage: str
    k: int
    score: float


def grid_search(snapshots, metrics=("cosine",), linkages=("complete",), k_values=(2, 3, 4)):
    """Score every (metric, linkage, k) by mean silhouette across snapshots.

    Each snapshot is a list of client weight vectors captured in one round.
    Results are sorted best first; equal scores fall back to lexical order.
    """
    snapshots = list(snapshots)
    metrics, linkages, k_values = list(metrics), list(linkages), list(k_values)
    if not snapshots or not (metrics and linkages and k_values):
        raise UsageError("grid search needs at least one snapshot and a non-empty grid")
    results = []
    for metric in metrics:
        dists = [pairwise_distances(s, metric) for s in snapshots]
        for linkage in linkages:
            trees = [agglomerative(D, linkage) for D in dists]
            for k in k_values:
                scores = []
                for D, Z in zip(dists, trees):
                    if not 2 <= k <= D.shape[0]:
                        raise UsageError(f"k={k} invalid for a snapshot of {D.shape[0]} clients")
                    scores.append(silhouette(D, cut_k(Z, k)))
                results.append(GridResult(metric, linkage, int(k), float(np.mean(scores))))
    results.sort(key=lambda r: (-r.score, r.metric, r.linkage, r.k))
    return results


def naive_oracle(D, linkage: str, k: int) -> np.ndarray:
    """Reference clustering that recomputes every linkage distance from scratch.

    O(n^3) per merge; meant for cross-checking :func:`agglomerative`.
    """
    D = _check_distance_matrix(D)
    n = D.shape[0]
    if not 1 <= k <= n:
        raise UsageError(f"k must lie in [1, {n}], got {k}")
    reduce = {"single": np.min, "complete": np.max, "average": np.mean}[linkage]
    clusters = [[i] for i in range(n)]
    while len(clusters) > k:
        clusters.sort(key=min)
        best = None
        for p in range(len(clusters)):
            for q in range(p + 1, len(clusters)):
                d = reduce(D[np.ix_(clusters[p], clusters[q])])
                if best is None or d < best[0]:
                    best = (d, p, q)
        _, p, q = best
        clusters[p] = clusters[p] + clusters[q]
        del clusters[q]
    return _canonical_labels(clusters)


class AgglomerativeClusterer(ClusterMixin, BaseEstimator):
    """Estimator wrapper: distances, dendrogram and flat cut in one ``fit``.

    Parameters
    ----------
    n_clusters : int
    metric : {"cosine", "euclidean", "manhattan", "precomputed"}
    linkage : {"single", "complete", "average"}

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
    linkage_matrix_ : ndarray of shape (n_samples - 1, 4)
    distance_matrix_ : ndarray of shape (n_samples, n_samples)
    """

    def __init__(self, n_clusters=2, metric="cosine", linkage="complete"):
        self.n_clusters = n_clusters
        self.metric = metric
        self.linkage = linkage

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.metric == "precomputed":
            D = _check_distance_matrix(X)
        else:
            D = pairwise_distances(X, self.metric)
        self.distance_matrix_ = D
        self.linkage_matrix_ = agglomerative(D, self.linkage)
        self.labels_ = cut_k(self.linkage_matrix_, self.n_clusters)
        self.n_features_in_ = X.shape[1]
        return self
