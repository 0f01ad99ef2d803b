import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freezecache.neighbors import (
    cluster_summary,
    kmeans_fit,
    knn_query,
    sq_dists,
)


def naive_knn(corpus, labels, query, k):
    # exhaustive oracle: python loops, stable sort on (distance, row index)
    scored = []
    for i in range(len(corpus)):
        d = 0.0
        for j in range(len(query)):
            d += (float(corpus[i][j]) - float(query[j])) ** 2
        scored.append((d, i))
    scored.sort()
    return [(int(labels[i]), math.sqrt(d)) for d, i in scored[: min(k, len(scored))]]


def test_knn_worked_example():
    corpus = np.array([[0.0, 0.0], [1.0, 0.0], [4.0, 0.0]])
    labels = np.array([0, 0, 1])  # A, A, B
    got = knn_query(corpus, labels, np.array([2.0, 0.0]), k=3)
    assert got.entries == [(0, 1.0), (0, 2.0), (1, 2.0)]
    assert got.k == 3


def test_knn_query_on_corpus_row():
    corpus = np.array([[1.0, 2.0], [3.0, 4.0]])
    got = knn_query(corpus, np.array([5, 7]), np.array([3.0, 4.0]), k=1)
    assert got.entries == [(7, 0.0)]


def test_knn_k_larger_than_corpus():
    corpus = np.array([[0.0], [2.0], [1.0]])
    got = knn_query(corpus, np.array([0, 1, 2]), np.array([0.0]), k=10)
    assert got.entries == [(0, 0.0), (2, 1.0), (1, 2.0)]


def test_knn_equidistant_ties_break_by_row_index():
    corpus = np.array([[1.0], [-1.0], [1.0]])
    got = knn_query(corpus, np.array([3, 4, 5]), np.array([0.0]), k=2)
    assert got.entries == [(3, 1.0), (4, 1.0)]


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 12),
    st.integers(1, 4),
    st.integers(1, 15),
)
def test_knn_matches_naive_oracle(seed, n, dim, k):
    rng = np.random.default_rng(seed)
    # half-integer grid coordinates make distances tie often and exactly
    corpus = rng.integers(-4, 5, size=(n, dim)) / 2.0
    labels = rng.integers(0, 4, size=n)
    query = rng.integers(-4, 5, size=dim) / 2.0
    got = knn_query(corpus, labels, query, k)
    want = naive_knn(corpus, labels, query, k)
    assert len(got.entries) == len(want)
    for (gl, gd), (wl, wd) in zip(got.entries, want):
        assert gl == wl
        assert gd == pytest.approx(wd, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.integers(1, 3))
def test_knn_permutation_invariant_multiset(seed, n, dim):
    rng = np.random.default_rng(seed)
    corpus = rng.standard_normal((n, dim))
    labels = rng.integers(0, 3, size=n)
    query = rng.standard_normal(dim)
    perm = rng.permutation(n)
    a = knn_query(corpus, labels, query, k=n)
    b = knn_query(corpus[perm], labels[perm], query, k=n)
    assert sorted(a.entries) == sorted(b.entries)


def test_knn_rejects_bad_arguments():
    corpus = np.array([[0.0, 1.0]])
    with pytest.raises(ValueError):
        knn_query(corpus, np.array([0]), np.array([0.0, 0.0]), k=0)
    with pytest.raises(ValueError):
        knn_query(corpus, np.array([0, 1]), np.array([0.0, 0.0]), k=1)
    with pytest.raises(ValueError):
        knn_query(corpus, np.array([0]), np.array([0.0]), k=1)


def test_sq_dists_non_negative_and_exact_on_grid():
    points = np.array([[0.0, 3.0], [4.0, 0.0]])
    d2 = sq_dists(points, np.array([0.0, 0.0]))
    assert d2.tolist() == [9.0, 16.0]
    assert (d2 >= 0).all()


def test_kmeans_distinct_points_reach_zero_inertia():
    points = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    res = kmeans_fit(points, 3, seed=0)
    assert res.inertia == 0.0
    assert sorted(res.centroids.tolist()) == sorted(points.tolist())


def test_kmeans_duplicated_points_reach_zero_inertia():
    # 5 distinct integer-valued vectors, each duplicated several times
    rng = np.random.default_rng(4)
    base = rng.integers(-20, 20, size=(5, 3)).astype(np.float64)
    points = np.repeat(base, repeats=(3, 1, 4, 2, 5), axis=0)
    res = kmeans_fit(points, 5, seed=7)
    assert res.inertia == 0.0


def test_kmeans_two_blobs_recovers_means():
    rng = np.random.default_rng(12)
    n = 400
    a = rng.normal((-10.0, 0.0), 1.0, size=(n, 2))
    b = rng.normal((10.0, 0.0), 1.0, size=(n, 2))
    res = kmeans_fit(np.vstack([a, b]), 2, seed=1)
    bound = 3.0 / math.sqrt(n)  # 3 sigma over root n
    found = sorted(res.centroids.tolist())  # ascending x: blob a then blob b
    for center, sample in zip(found, [a, b]):
        assert np.linalg.norm(np.asarray(center) - sample.mean(axis=0)) < bound


def test_kmeans_deterministic():
    rng = np.random.default_rng(3)
    points = rng.standard_normal((50, 4))
    r1 = kmeans_fit(points, 6, seed=9)
    r2 = kmeans_fit(points, 6, seed=9)
    assert np.array_equal(r1.assignments, r2.assignments)
    assert np.array_equal(r1.centroids, r2.centroids)


def test_kmeans_inertia_history_non_increasing():
    rng = np.random.default_rng(21)
    points = rng.standard_normal((200, 5))
    res = kmeans_fit(points, 8, seed=2)
    hist = res.inertia_history
    assert len(hist) >= 1
    assert all(hist[i + 1] <= hist[i] for i in range(len(hist) - 1))
    assert res.inertia == hist[-1]


def test_kmeans_every_point_assigned_to_nearest_centroid():
    rng = np.random.default_rng(8)
    points = rng.standard_normal((120, 3))
    res = kmeans_fit(points, 5, seed=5)
    for i in range(points.shape[0]):
        d2 = sq_dists(res.centroids, points[i])
        assert d2[res.assignments[i]] <= d2.min() + 1e-12


def test_kmeans_rejects_bad_arguments():
    points = np.zeros((4, 2))
    with pytest.raises(ValueError):
        kmeans_fit(points, 0, seed=0)
    with pytest.raises(ValueError):
        kmeans_fit(points, 5, seed=0)
    with pytest.raises(ValueError):
        kmeans_fit(np.array([[np.nan, 0.0]]), 1, seed=0)


def test_cluster_summary_majority_counting():
    res = kmeans_fit(np.array([[0.0], [0.1], [-0.1], [50.0]]), 2, seed=0)
    labels = np.array([0, 0, 1, 2])
    stats = cluster_summary(res, labels)
    big = max(stats, key=lambda s: s.size)
    assert big.size == 3
    assert big.majority_label == 0
    assert big.majority_fraction == pytest.approx(2.0 / 3.0)


def test_cluster_summary_single_label_all_ones():
    rng = np.random.default_rng(6)
    points = rng.standard_normal((30, 2))
    res = kmeans_fit(points, 4, seed=3)
    stats = cluster_summary(res, np.zeros(30, dtype=np.int64))
    assert all(s.majority_fraction == 1.0 for s in stats)
    assert all(s.majority_label == 0 for s in stats)


def test_cluster_summary_tie_breaks_to_lowest_label():
    res = kmeans_fit(np.array([[0.0], [0.2]]), 1, seed=0)
    stats = cluster_summary(res, np.array([5, 2]))
    assert stats[0].majority_label == 2
    assert stats[0].majority_fraction == 0.5
