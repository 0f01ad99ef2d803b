"""Exact brute-force k-nearest-neighbour search and Lloyd's k-means with
k-means++ seeding. Everything computes in float64 with fixed tie-breaking
so results are reproducible bit for bit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NeighborSet:
    """Neighbors as (label, distance), sorted by ascending distance with
    ties broken by lower corpus row index."""

    entries: list[tuple[int, float]]
    k: int


def sq_dists(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances from every row to the query.

    Computed from direct differences, never the expanded dot-product form,
    so values are non-negative and ties are stable.
    """
    diff = points - query
    return np.einsum("ij,ij->i", diff, diff)


def knn_query(corpus: np.ndarray, labels: np.ndarray, query: np.ndarray, k: int) -> NeighborSet:
    """The k nearest corpus rows to the query.

    Asking for more neighbors than the corpus holds returns every row,
    still sorted.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ValueError("corpus must be a non-empty 2-d array")
    if query.shape != (corpus.shape[1],):
        raise ValueError(
            f"query shape {query.shape} does not match corpus dim {corpus.shape[1]}"
        )
    if labels.shape != (corpus.shape[0],):
        raise ValueError("labels must align with corpus rows")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    d2 = sq_dists(corpus, query)
    order = np.argsort(d2, kind="stable")[: min(k, corpus.shape[0])]
    entries = [(int(labels[i]), float(np.sqrt(d2[i]))) for i in order]
    return NeighborSet(entries, k)


@dataclass
class Clustering:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)


def _assign(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-center assignment (ties to the lower index) plus each
    point's squared distance. Chunked to bound the (chunk, C, d) buffer."""
    n, d = points.shape
    c = centers.shape[0]
    chunk = max(1, int(4_000_000 // max(1, c * d)))
    assignments = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        block = points[start : start + chunk]
        d2 = ((block[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        assignments[start : start + block.shape[0]] = idx
        best[start : start + block.shape[0]] = d2[np.arange(block.shape[0]), idx]
    return assignments, best


def _kmeans_pp_init(points: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++: first center uniform, the rest sampled with probability
    proportional to squared distance from the nearest chosen center."""
    n, d = points.shape
    centers = np.empty((n_clusters, d), dtype=np.float64)
    chosen = np.zeros(n, dtype=bool)
    idx = int(rng.integers(n))
    centers[0] = points[idx]
    chosen[idx] = True
    closest = sq_dists(points, centers[0])
    for j in range(1, n_clusters):
        total = float(closest.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # remaining mass is all on existing centers: duplicates
            unchosen = np.flatnonzero(~chosen)
            idx = int(unchosen[0]) if unchosen.size else int(rng.integers(n))
        centers[j] = points[idx]
        chosen[idx] = True
        closest = np.minimum(closest, sq_dists(points, centers[j]))
    return centers


def kmeans_fit(
    points: np.ndarray,
    n_clusters: int,
    seed: int,
    max_iter: int = 100,
    rel_tol: float = 1e-4,
) -> Clustering:
    """Lloyd iterations from a k-means++ seeding.

    Convergence: the largest centroid shift drops below ``rel_tol`` times
    the RMS norm of the points. Empty clusters are reseeded to the point
    currently farthest from its assigned centroid. ``inertia_history``
    records the inertia after every assignment step; Lloyd's updates make
    the sequence non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty 2-d array")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    if not 1 <= n_clusters <= points.shape[0]:
        raise ValueError(
            f"n_clusters must be in [1, {points.shape[0]}], got {n_clusters}"
        )
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, n_clusters, rng)
    scale = float(np.sqrt(np.mean(np.einsum("ij,ij->i", points, points))))
    if scale == 0.0:
        scale = 1.0

    history: list[float] = []
    iterations = 0
    for _ in range(max_iter):
        assignments, best = _assign(points, centers)
        history.append(float(best.sum()))
        new_centers = centers.copy()
        counts = np.bincount(assignments, minlength=n_clusters)
        for ci in range(n_clusters):
            if counts[ci] > 0:
                new_centers[ci] = points[assignments == ci].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            farthest = np.argsort(-best, kind="stable")
            for ci, pi in zip(empty, farthest):
                new_centers[ci] = points[pi]
        iterations += 1
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1).max()))
        centers = new_centers
        if shift <= rel_tol * scale:
            break
    assignments, best = _assign(points, centers)
    history.append(float(best.sum()))
    return Clustering(centers, assignments, history[-1], iterations, history)


@dataclass(frozen=True)
class ClusterStats:
    cluster: int
    centroid: np.ndarray
    majority_label: int
    majority_fraction: float
    size: int


def cluster_summary(clustering: Clustering, labels: np.ndarray) -> list[ClusterStats]:
    """Majority label and its fraction per cluster; label ties break to the
    lower label index. Clusters that ended up empty (possible only with
    duplicate-heavy data) are omitted."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != clustering.assignments.shape:
        raise ValueError("labels must align with the clustered points")
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    stats: list[ClusterStats] = []
    for ci in range(clustering.centroids.shape[0]):
        member_labels = labels[clustering.assignments == ci]
        if member_labels.size == 0:
            continue
        counts = np.bincount(member_labels)
        majority = int(np.argmax(counts))
        stats.append(
            ClusterStats(
                cluster=ci,
                centroid=clustering.centroids[ci].copy(),
                majority_label=majority,
                majority_fraction=float(counts[majority] / member_labels.size),
                size=int(member_labels.size),
            )
        )
    return stats
