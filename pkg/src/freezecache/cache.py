"""Per-layer approximate caches and the lookup confidence rules.

Two cache variants exist. KNN keeps every reduced training embedding with
its model label; a lookup fetches the k nearest entries and scores each
candidate label as (share of the k neighbors) times (sum of inverse
distances to its occurrences). CENTROID keeps k-means centroids with each
cluster's majority label and majority fraction; a lookup scores the
nearest centroid's label as fraction over distance. Distances are clamped
below at DIST_EPS so exact hits stay finite.

On disk: ``cache_layer<k>.fzc`` is magic ``FZCC``, version u32, mode u8
(0 = KNN, 1 = CENTROID), one u64 (the query-time k for KNN, the row count
for CENTROID), embed_dim u64, a float32 vector block, a u32 label block,
and for CENTROID a float32 fraction block, all little-endian. KNN row
count is derived from the file size and validated by divisibility.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, FormatError
from .neighbors import cluster_summary, kmeans_fit, knn_query, sq_dists
from .reduce import Reducer, apply_reducer
from .trace import ActivationTrace

DIST_EPS = 1e-9
CACHE_MAGIC = b"FZCC"
FORMAT_VERSION = 1

MODE_KNN = "knn"
MODE_CENTROID = "centroid"
_MODE_CODES = {MODE_KNN: 0, MODE_CENTROID: 1}
_CODE_MODES = {code: mode for mode, code in _MODE_CODES.items()}

_HEADER = struct.Struct("<IBQQ")  # version, mode, k-or-count, embed_dim
_FILE_RE = re.compile(r"cache_layer(\d+)\.fzc$")


@dataclass
class LayerCache:
    """One layer's cache. ``vectors`` are float64 upcasts of float32
    values, so saving and loading round-trips bit for bit."""

    layer_index: int
    mode: str
    vectors: np.ndarray
    labels: np.ndarray
    k: int | None = None
    fractions: np.ndarray | None = None

    @property
    def embed_dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def __post_init__(self) -> None:
        if self.mode not in _MODE_CODES:
            raise ValueError(f"unknown cache mode {self.mode!r}")
        if self.vectors.ndim != 2 or self.size == 0:
            raise ValueError("cache vectors must be a non-empty 2-d array")
        if self.labels.shape != (self.size,):
            raise ValueError("cache labels must align with vectors")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("cache labels must be non-negative")
        if self.mode == MODE_KNN:
            if self.k is None or self.k < 1:
                raise ValueError("KNN cache needs k >= 1")
            if self.fractions is not None:
                raise ValueError("KNN cache does not carry fractions")
        else:
            if self.fractions is None or self.fractions.shape != (self.size,):
                raise ValueError("CENTROID cache needs one fraction per row")
            if np.any(self.fractions <= 0.0) or np.any(self.fractions > 1.0):
                raise ValueError("majority fractions must lie in (0, 1]")


@dataclass(frozen=True)
class LookupResult:
    label: int
    confidence: float
    per_label_confidence: dict[int, float] | None = None


def _embedded_split(
    trace: ActivationTrace,
    reducers: Mapping[int, Reducer | None],
    split: str,
) -> list[np.ndarray]:
    if split not in trace.splits:
        raise ValueError(f"trace has no split {split!r}")
    data = trace.splits[split]
    if data.num_examples == 0:
        raise ValueError(f"split {split!r} is empty; cannot build a cache from it")
    embedded = []
    for layer in trace.layers:
        if layer.index not in reducers:
            raise ConfigurationError(
                f"no reducer for layer {layer.index}; train one or disable reduction"
            )
        embedded.append(
            apply_reducer(reducers[layer.index], data.activations[layer.index])
        )
    return embedded


def construct_knn_cache(
    trace: ActivationTrace,
    reducers: Mapping[int, Reducer | None],
    k: int = 5,
    split: str = "train",
) -> list[LayerCache]:
    """One KNN cache per layer holding every embedded example of the split."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    embedded = _embedded_split(trace, reducers, split)
    labels = trace.splits[split].model_labels.astype(np.int64)
    return [
        LayerCache(
            layer_index=layer.index,
            mode=MODE_KNN,
            vectors=emb.astype(np.float64),
            labels=labels.copy(),
            k=k,
        )
        for layer, emb in zip(trace.layers, embedded)
    ]


def construct_centroid_cache(
    trace: ActivationTrace,
    reducers: Mapping[int, Reducer | None],
    n_clusters: int = 200,
    seed: int = 0,
    split: str = "train",
    max_iter: int = 100,
    rel_tol: float = 1e-4,
) -> list[LayerCache]:
    """One centroid cache per layer: k-means centroids with majority labels.

    Layer ``i`` clusters with seed ``seed + i`` so caches are independent
    but the whole construction is reproducible from one seed.
    """
    embedded = _embedded_split(trace, reducers, split)
    labels = trace.splits[split].model_labels
    caches = []
    for layer, emb in zip(trace.layers, embedded):
        clustering = kmeans_fit(
            emb, n_clusters, seed=seed + layer.index, max_iter=max_iter, rel_tol=rel_tol
        )
        stats = cluster_summary(clustering, labels)
        centroids = np.stack([s.centroid for s in stats])
        caches.append(
            LayerCache(
                layer_index=layer.index,
                mode=MODE_CENTROID,
                vectors=centroids.astype(np.float32).astype(np.float64),
                labels=np.array([s.majority_label for s in stats], dtype=np.int64),
                fractions=np.array(
                    [s.majority_fraction for s in stats], dtype=np.float32
                ).astype(np.float64),
            )
        )
    return caches


def lookup(cache: LayerCache, embedding: np.ndarray) -> LookupResult:
    """Scores the cache against one embedded query.

    Confidence ties between labels break to the lower label index. When a
    KNN cache holds fewer than k rows, the share uses the count actually
    returned so shares still sum to one.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape != (cache.embed_dim,):
        raise ValueError(
            f"embedding dim {emb.shape} does not match cache dim {cache.embed_dim}"
        )
    if cache.mode == MODE_KNN:
        neighbors = knn_query(cache.vectors, cache.labels, emb, cache.k)
        k_eff = len(neighbors.entries)
        counts: dict[int, int] = {}
        inv_sums: dict[int, float] = {}
        for label, dist in neighbors.entries:
            counts[label] = counts.get(label, 0) + 1
            inv_sums[label] = inv_sums.get(label, 0.0) + 1.0 / max(dist, DIST_EPS)
        per = {
            label: (counts[label] / k_eff) * inv_sums[label]
            for label in sorted(counts)
        }
    else:
        d2 = sq_dists(cache.vectors, emb)
        ci = int(np.argmin(d2))
        dist = float(np.sqrt(d2[ci]))
        per = {
            int(cache.labels[ci]): float(cache.fractions[ci]) / max(dist, DIST_EPS)
        }
    best_label, best_conf = None, -1.0
    for label in sorted(per):
        if per[label] > best_conf:
            best_label, best_conf = label, per[label]
    return LookupResult(int(best_label), float(best_conf), per)


def memory_bytes(caches: list[LayerCache]) -> tuple[list[int], int]:
    """Cache footprint: four bytes per float32 vector component plus four
    per u32 label, and for centroid entries four more for the fraction."""
    per_layer = []
    for cache in caches:
        n = cache.size
        total = n * cache.embed_dim * 4 + n * 4
        if cache.mode == MODE_CENTROID:
            total += n * 4
        per_layer.append(int(total))
    return per_layer, int(sum(per_layer))


def save_cache(cache: LayerCache, path: Path | str) -> Path:
    path = Path(path)
    if cache.labels.max(initial=0) > 0xFFFFFFFF:
        raise ValueError(f"labels do not fit in u32: {path.name}")
    param = cache.k if cache.mode == MODE_KNN else cache.size
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(
            _HEADER.pack(FORMAT_VERSION, _MODE_CODES[cache.mode], param, cache.embed_dim)
        )
        fh.write(np.ascontiguousarray(cache.vectors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cache.labels, dtype="<u4").tobytes())
        if cache.mode == MODE_CENTROID:
            fh.write(np.ascontiguousarray(cache.fractions, dtype="<f4").tobytes())
    return path


def load_cache(path: Path | str, layer_index: int | None = None) -> LayerCache:
    path = Path(path)
    if layer_index is None:
        match = _FILE_RE.search(path.name)
        if not match:
            raise FormatError(f"{path}: cannot infer layer index from file name")
        layer_index = int(match.group(1))
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    header_len = 4 + _HEADER.size
    if len(data) < header_len:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, mode_code, param, embed_dim = _HEADER.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if mode_code not in _CODE_MODES:
        raise FormatError(f"{path}: unknown mode code {mode_code}")
    mode = _CODE_MODES[mode_code]
    if embed_dim < 1:
        raise FormatError(f"{path}: non-positive embed_dim")
    body = len(data) - header_len
    if mode == MODE_KNN:
        per_row = 4 * embed_dim + 4
        if body % per_row != 0 or body == 0:
            raise FormatError(f"{path}: body size {body} is not a whole number of rows")
        rows = body // per_row
    else:
        rows = param
        if body != rows * (4 * embed_dim + 8):
            raise FormatError(f"{path}: body size {body} disagrees with row count {rows}")
    offset = header_len
    vectors = np.frombuffer(data, dtype="<f4", count=rows * embed_dim, offset=offset)
    offset += 4 * rows * embed_dim
    labels = np.frombuffer(data, dtype="<u4", count=rows, offset=offset)
    offset += 4 * rows
    fractions = None
    if mode == MODE_CENTROID:
        fractions = np.frombuffer(data, dtype="<f4", count=rows, offset=offset).astype(
            np.float64
        )
    try:
        return LayerCache(
            layer_index=layer_index,
            mode=mode,
            vectors=vectors.reshape(rows, embed_dim).astype(np.float64),
            labels=labels.astype(np.int64),
            k=int(param) if mode == MODE_KNN else None,
            fractions=fractions,
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_caches(caches: list[LayerCache], directory: Path | str) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [
        save_cache(cache, directory / f"cache_layer{cache.layer_index}.fzc")
        for cache in caches
    ]


def load_caches(directory: Path | str) -> list[LayerCache]:
    directory = Path(directory)
    caches = [load_cache(path) for path in sorted(directory.glob("cache_layer*.fzc"))]
    return sorted(caches, key=lambda c: c.layer_index)
