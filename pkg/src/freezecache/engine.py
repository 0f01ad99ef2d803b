"""The freeze engine: walk a classifier's layers, consult each layer's
cache, and stop early once a lookup clears that layer's threshold.

Two execution modes exist. Trace replay (the canonical path) walks
precomputed activations; the live path drives a RefModel layer by layer
and genuinely skips the layers past the freeze point. Both funnel every
lookup through the same embed_one/lookup code path used at calibration
time, so the zero-validation-error guarantee holds exactly.

The oracle variant ignores confidences entirely and freezes at the first
layer whose lookup label already agrees with the model's final prediction;
it upper-bounds what any threshold rule could freeze correctly.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import net
from .cache import LayerCache, lookup
from .errors import FormatError
from .reduce import Reducer, embed_one
from .threshold import ThresholdTable
from .trace import ActivationTrace, RefModel


@dataclass(frozen=True)
class LayerRecord:
    layer: int
    label: int | None
    confidence: float | None
    threshold: float | None
    froze: bool


@dataclass
class FreezeResult:
    example_id: int
    frozen_layer: int | None
    label: int
    confidence: float | None
    model_label: int | None
    layer_records: list[LayerRecord] = field(default_factory=list)


@dataclass
class TimingStats:
    """Wall-clock totals; lookup covers embed plus cache query."""

    lookup_total_ns: np.ndarray
    lookup_count: np.ndarray
    forward_total_ns: np.ndarray
    forward_count: np.ndarray

    @classmethod
    def empty(cls, num_layers: int) -> "TimingStats":
        return cls(
            np.zeros(num_layers, dtype=np.int64),
            np.zeros(num_layers, dtype=np.int64),
            np.zeros(num_layers, dtype=np.int64),
            np.zeros(num_layers, dtype=np.int64),
        )

    def merge(self, other: "TimingStats") -> None:
        self.lookup_total_ns += other.lookup_total_ns
        self.lookup_count += other.lookup_count
        self.forward_total_ns += other.forward_total_ns
        self.forward_count += other.forward_count


@dataclass
class EvaluationRun:
    results: list[FreezeResult]
    num_layers: int
    mode: str  # "engine" | "oracle"
    timing: TimingStats


def _check_alignment(caches: Sequence[LayerCache], table: ThresholdTable | None) -> None:
    if not caches:
        raise ValueError("no caches given")
    if table is not None and table.num_layers != len(caches):
        raise ValueError(
            f"threshold table covers {table.num_layers} layers, caches cover {len(caches)}"
        )


def freeze_infer(
    layer_activations: Sequence[np.ndarray],
    model_label: int,
    caches: Sequence[LayerCache],
    reducers: Mapping[int, Reducer | None],
    table: ThresholdTable,
    example_id: int = 0,
    timing: TimingStats | None = None,
) -> FreezeResult:
    """Replays one example. Layers past the freeze point are never
    consulted; disabled layers are recorded but not looked up."""
    _check_alignment(caches, table)
    records: list[LayerRecord] = []
    for pos, cache in enumerate(caches):
        threshold = float(table.thresholds[pos])
        if not table.enabled[pos]:
            records.append(LayerRecord(pos, None, None, threshold, False))
            continue
        start = time.perf_counter_ns() if timing is not None else 0
        result = lookup(cache, embed_one(reducers[cache.layer_index],
                                         layer_activations[cache.layer_index]))
        if timing is not None:
            timing.lookup_total_ns[pos] += time.perf_counter_ns() - start
            timing.lookup_count[pos] += 1
        froze = result.confidence > threshold
        records.append(
            LayerRecord(pos, result.label, result.confidence, threshold, froze)
        )
        if froze:
            return FreezeResult(
                example_id, pos, result.label, result.confidence, int(model_label), records
            )
    return FreezeResult(example_id, None, int(model_label), None, int(model_label), records)


def _oracle_result(
    layer_activations: Sequence[np.ndarray],
    caches: Sequence[LayerCache],
    reducers: Mapping[int, Reducer | None],
    model_label: int,
    example_id: int = 0,
    timing: TimingStats | None = None,
) -> FreezeResult:
    records: list[LayerRecord] = []
    for pos, cache in enumerate(caches):
        start = time.perf_counter_ns() if timing is not None else 0
        result = lookup(cache, embed_one(reducers[cache.layer_index],
                                         layer_activations[cache.layer_index]))
        if timing is not None:
            timing.lookup_total_ns[pos] += time.perf_counter_ns() - start
            timing.lookup_count[pos] += 1
        agrees = result.label == model_label
        records.append(
            LayerRecord(pos, result.label, result.confidence, None, agrees)
        )
        if agrees:
            return FreezeResult(
                example_id, pos, result.label, result.confidence, int(model_label), records
            )
    return FreezeResult(example_id, None, int(model_label), None, int(model_label), records)


def oracle_freeze(
    layer_activations: Sequence[np.ndarray],
    caches: Sequence[LayerCache],
    reducers: Mapping[int, Reducer | None],
    model_label: int,
) -> int | None:
    """Earliest layer whose lookup already returns the model's own label,
    confidence ignored; None when no layer agrees."""
    _check_alignment(caches, None)
    return _oracle_result(layer_activations, caches, reducers, model_label).frozen_layer


def freeze_infer_live(
    model: RefModel,
    x: np.ndarray,
    caches: Sequence[LayerCache],
    reducers: Mapping[int, Reducer | None],
    table: ThresholdTable,
    example_id: int = 0,
    timing: TimingStats | None = None,
) -> FreezeResult:
    """Runs the model layer by layer, freezing as soon as a cache clears
    its threshold; layers past the freeze point are never computed.

    Hidden activations are rounded to float32 at the lookup boundary only,
    matching what forward_collect records, so live and replay agree bit
    for bit. The model's own label is unknown when frozen early, so
    model_label is None in that case.
    """
    _check_alignment(caches, table)
    if len(caches) != len(model.hidden_widths):
        raise ValueError("caches do not cover the model's hidden layers")
    a = np.asarray(x, dtype=np.float64)
    records: list[LayerRecord] = []
    for pos, (w, b) in enumerate(model.params[:-1]):
        a = net.affine_relu(a, w, b)
        cache = caches[pos]
        threshold = float(table.thresholds[pos])
        if not table.enabled[pos]:
            records.append(LayerRecord(pos, None, None, threshold, False))
            continue
        start = time.perf_counter_ns() if timing is not None else 0
        result = lookup(
            cache, embed_one(reducers[cache.layer_index], a.astype(np.float32))
        )
        if timing is not None:
            timing.lookup_total_ns[pos] += time.perf_counter_ns() - start
            timing.lookup_count[pos] += 1
        froze = result.confidence > threshold
        records.append(
            LayerRecord(pos, result.label, result.confidence, threshold, froze)
        )
        if froze:
            return FreezeResult(
                example_id, pos, result.label, result.confidence, None, records
            )
    w, b = model.params[-1]
    label = int(np.argmax(a @ w + b))
    return FreezeResult(example_id, None, label, None, label, records)


def batch_evaluate(
    trace: ActivationTrace,
    split: str,
    caches: Sequence[LayerCache],
    reducers: Mapping[int, Reducer | None],
    table: ThresholdTable | None = None,
    mode: str = "engine",
    threads: int = 1,
) -> EvaluationRun:
    """Replays a whole split; results keep the split's example order.

    Per-example work is independent, so threads > 1 fans out over a thread
    pool; per-layer lookup timings are merged afterwards.
    """
    if mode not in ("engine", "oracle"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "engine" and table is None:
        raise ValueError("engine mode needs a threshold table")
    _check_alignment(caches, table if mode == "engine" else None)
    if split not in trace.splits:
        raise ValueError(f"trace has no split {split!r}")
    data = trace.splits[split]
    num_layers = len(caches)
    total = TimingStats.empty(num_layers)

    def eval_one(i: int) -> tuple[FreezeResult, TimingStats]:
        local = TimingStats.empty(num_layers)
        activations = [data.activations[li][i] for li in range(trace.num_layers)]
        label = int(data.model_labels[i])
        if mode == "engine":
            result = freeze_infer(
                activations, label, caches, reducers, table, example_id=i, timing=local
            )
        else:
            result = _oracle_result(
                activations, caches, reducers, label, example_id=i, timing=local
            )
        return result, local

    n = data.num_examples
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(eval_one, range(n)))
    else:
        pairs = [eval_one(i) for i in range(n)]
    results = []
    for result, local in pairs:
        results.append(result)
        total.merge(local)
    return EvaluationRun(results, num_layers, mode, total)


def measure_forward_times(
    model: RefModel, repeats: int = 200, seed: int = 0
) -> TimingStats:
    """Wall-clock cost of each hidden layer's forward transform, measured
    on random inputs. Timing only; the values computed are discarded."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    rng = np.random.default_rng(seed)
    num_layers = len(model.hidden_widths)
    stats = TimingStats.empty(num_layers)
    x = rng.standard_normal(model.input_dim)
    for _ in range(repeats):
        a = x
        for pos, (w, b) in enumerate(model.params[:-1]):
            start = time.perf_counter_ns()
            a = net.affine_relu(a, w, b)
            stats.forward_total_ns[pos] += time.perf_counter_ns() - start
            stats.forward_count[pos] += 1
    return stats


def write_records(run: EvaluationRun, path: Path | str) -> Path:
    """Line-delimited JSON, one record per example in split order."""
    path = Path(path)
    with open(path, "w") as fh:
        for r in run.results:
            fh.write(
                json.dumps(
                    {
                        "id": r.example_id,
                        "frozen_layer": r.frozen_layer,
                        "label": r.label,
                        "model_label": r.model_label,
                        "confidence": r.confidence,
                    }
                )
            )
            fh.write("\n")
    return path


def read_records(path: Path | str, num_layers: int, mode: str = "engine") -> EvaluationRun:
    """Rebuilds a run summary from a record file (layer_records are not
    persisted, so they come back empty)."""
    path = Path(path)
    results = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            results.append(
                FreezeResult(
                    example_id=int(rec["id"]),
                    frozen_layer=None
                    if rec["frozen_layer"] is None
                    else int(rec["frozen_layer"]),
                    label=int(rec["label"]),
                    confidence=None
                    if rec.get("confidence") is None
                    else float(rec["confidence"]),
                    model_label=None
                    if rec.get("model_label") is None
                    else int(rec["model_label"]),
                )
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return EvaluationRun(results, num_layers, mode, TimingStats.empty(num_layers))
