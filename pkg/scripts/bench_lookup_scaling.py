#!/usr/bin/env python3
"""Measure how lookup cost grows with cache size for both cache modes.

Prints one row per (mode, rows): median ns per lookup and cache bytes.
Centroid caches keep a fixed row count while knn rows track the corpus,
which is the whole point of the comparison.
"""

import argparse
import sys
import time

import numpy as np

from freezecache.cache import LayerCache, lookup, memory_bytes


def build(mode, rows, dim, rng):
    vectors = rng.standard_normal((rows, dim))
    labels = rng.integers(0, 10, size=rows)
    if mode == "knn":
        return LayerCache(layer_index=0, mode="knn", vectors=vectors,
                          labels=labels, k=5)
    return LayerCache(layer_index=0, mode="centroid", vectors=vectors,
                      labels=labels, fractions=np.full(rows, 0.9))


def time_lookups(cache, queries, repeats):
    # min over repeats rejects scheduler noise; one untimed warmup pass
    for q in queries:
        lookup(cache, q)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter_ns()
        for q in queries:
            lookup(cache, q)
        best = min(best, (time.perf_counter_ns() - start) / len(queries))
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--sizes", type=int, nargs="+",
                    default=[250, 500, 1000, 2000, 4000, 8000])
    ap.add_argument("--centroid-rows", type=int, default=200,
                    help="fixed row count for the centroid column")
    ap.add_argument("--queries", type=int, default=50)
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    queries = rng.standard_normal((args.queries, args.dim))
    print(f"{'rows':>8} {'knn ns/q':>12} {'knn bytes':>12} "
          f"{'centroid ns/q':>14} {'centroid bytes':>15}")
    centroid = build("centroid", args.centroid_rows, args.dim, rng)
    cent_ns = time_lookups(centroid, queries, args.repeats)
    cent_bytes = memory_bytes([centroid])[1]
    for rows in args.sizes:
        knn = build("knn", rows, args.dim, rng)
        knn_ns = time_lookups(knn, queries, args.repeats)
        knn_bytes = memory_bytes([knn])[1]
        print(f"{rows:>8} {knn_ns:>12.0f} {knn_bytes:>12} "
              f"{cent_ns:>14.0f} {cent_bytes:>15}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
