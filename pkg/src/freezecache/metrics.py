"""Measurement over evaluation runs: freeze-depth CDFs, agreement
accuracies, cluster purity, timing summaries, threshold sweeps, and the
CSV emitters behind the CLI. CSV columns are plain comma-separated with a
header row, friendly to gnuplot and pandas alike."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cache import LayerCache, memory_bytes
from .engine import EvaluationRun, batch_evaluate
from .neighbors import cluster_summary, kmeans_fit
from .reduce import Reducer, apply_reducer
from .threshold import ThresholdTable, scale_thresholds
from .trace import ActivationTrace


def frozen_cdf(run: EvaluationRun, num_layers: int | None = None) -> np.ndarray:
    """fraction of examples with frozen_layer <= l, for each layer l.

    Unfrozen examples never enter a bin, so an all-unfrozen run gives an
    all-zero curve.
    """
    if not run.results:
        raise ValueError("run is empty")
    if num_layers is None:
        num_layers = run.num_layers
    counts = np.zeros(num_layers, dtype=np.int64)
    for result in run.results:
        if result.frozen_layer is not None:
            if result.frozen_layer >= num_layers:
                raise ValueError(
                    f"frozen_layer {result.frozen_layer} out of range for {num_layers} layers"
                )
            counts[result.frozen_layer] += 1
    return np.cumsum(counts) / len(run.results)


def agreement_accuracy(run: EvaluationRun) -> tuple[float | None, float]:
    """(frozen-only agreement, overall agreement) against the model's own
    labels. Unfrozen examples fall back to the model's prediction and so
    always agree. Frozen-only is None when nothing froze."""
    if not run.results:
        raise ValueError("run is empty")
    frozen = agree = 0
    for result in run.results:
        if result.frozen_layer is None:
            continue
        if result.model_label is None:
            raise ValueError("run lacks model labels; replay the trace to get them")
        frozen += 1
        if result.label == result.model_label:
            agree += 1
    total = len(run.results)
    overall = (agree + (total - frozen)) / total
    frozen_only = (agree / frozen) if frozen else None
    return frozen_only, overall


@dataclass(frozen=True)
class LayerPurity:
    layer_index: int
    fractions: np.ndarray
    sizes: np.ndarray
    mean_fraction: float


@dataclass
class PurityReport:
    layers: list[LayerPurity]

    @property
    def mean_fractions(self) -> dict[int, float]:
        return {lp.layer_index: lp.mean_fraction for lp in self.layers}


def purity_report(
    trace: ActivationTrace,
    n_clusters: int,
    seed: int,
    layer_indices: Sequence[int] | None = None,
    split: str = "train",
    reducers: Mapping[int, Reducer | None] | None = None,
) -> PurityReport:
    """Clusters each requested layer's activations (reduced when reducers
    are given, raw otherwise) and reports each cluster's majority-label
    fraction. Layer i clusters with seed ``seed + i``."""
    if split not in trace.splits:
        raise ValueError(f"trace has no split {split!r}")
    data = trace.splits[split]
    if layer_indices is None:
        layer_indices = [layer.index for layer in trace.layers]
    layers = []
    for li in layer_indices:
        if not 0 <= li < trace.num_layers:
            raise ValueError(f"layer index {li} out of range")
        points = data.activations[li]
        if reducers is not None:
            if li not in reducers:
                raise ValueError(f"no reducer for layer {li}")
            points = apply_reducer(reducers[li], points)
        clustering = kmeans_fit(points, n_clusters, seed=seed + li)
        stats = cluster_summary(clustering, data.model_labels)
        fractions = np.array([s.majority_fraction for s in stats])
        sizes = np.array([s.size for s in stats], dtype=np.int64)
        layers.append(LayerPurity(li, fractions, sizes, float(fractions.mean())))
    return PurityReport(layers)


@dataclass(frozen=True)
class TimingReport:
    lookup_mean_ns: float | None
    lookup_samples: int
    forward_mean_ns: float | None
    forward_samples: int
    forward_over_lookup: float | None


def timing_report(run: EvaluationRun) -> TimingReport:
    """Mean per-lookup and per-layer-forward wall time plus their ratio;
    fields are None where nothing was measured."""
    t = run.timing
    lookup_n = int(t.lookup_count.sum())
    forward_n = int(t.forward_count.sum())
    lookup_mean = float(t.lookup_total_ns.sum() / lookup_n) if lookup_n else None
    forward_mean = float(t.forward_total_ns.sum() / forward_n) if forward_n else None
    ratio = None
    if lookup_mean and forward_mean:
        ratio = forward_mean / lookup_mean
    return TimingReport(lookup_mean, lookup_n, forward_mean, forward_n, ratio)


@dataclass(frozen=True)
class SweepPoint:
    lam: float
    frozen_pct: float
    frozen_accuracy: float | None


def sweep(
    trace: ActivationTrace,
    split: str,
    caches: list[LayerCache],
    reducers: Mapping[int, Reducer | None],
    base_table: ThresholdTable,
    lam_grid: Sequence[float],
    threads: int = 1,
) -> list[SweepPoint]:
    """Replays the split once per lambda, scaling the base table each time.

    Raising lambda only tightens every layer's bar, so the frozen fraction
    is non-increasing along an ascending grid.
    """
    if len(lam_grid) == 0:
        raise ValueError("lam_grid is empty")
    points = []
    for lam in lam_grid:
        table = scale_thresholds(base_table, lam)
        run = batch_evaluate(
            trace, split, caches, reducers, table, mode="engine", threads=threads
        )
        frozen = sum(1 for r in run.results if r.frozen_layer is not None)
        frozen_only, _ = agreement_accuracy(run)
        points.append(
            SweepPoint(float(lam), 100.0 * frozen / len(run.results), frozen_only)
        )
    return points


def _fmt(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_cdf_csv(
    path: Path | str, engine_cdf: np.ndarray, oracle_cdf: np.ndarray | None
) -> Path:
    rows = []
    for layer in range(len(engine_cdf)):
        oracle_value = None if oracle_cdf is None else float(oracle_cdf[layer])
        rows.append([layer, float(engine_cdf[layer]), oracle_value])
    return _write_csv(Path(path), ["layer", "engine_frac", "oracle_frac"], rows)


def write_sweep_csv(path: Path | str, points: list[SweepPoint]) -> Path:
    rows = [[p.lam, p.frozen_pct, p.frozen_accuracy] for p in points]
    return _write_csv(Path(path), ["lambda", "frozen_pct", "frozen_acc"], rows)


def write_purity_csvs(directory: Path | str, report: PurityReport) -> list[Path]:
    directory = Path(directory)
    paths = []
    for lp in report.layers:
        rows = [
            [ci, float(lp.fractions[ci]), int(lp.sizes[ci])]
            for ci in range(len(lp.fractions))
        ]
        paths.append(
            _write_csv(
                directory / f"purity_layer{lp.layer_index}.csv",
                ["cluster", "fraction", "size"],
                rows,
            )
        )
    return paths


def write_memory_csv(path: Path | str, caches: list[LayerCache]) -> Path:
    per_layer, _ = memory_bytes(caches)
    rows = [
        [cache.layer_index, cache.mode, per_layer[pos]]
        for pos, cache in enumerate(caches)
    ]
    return _write_csv(Path(path), ["layer", "mode", "bytes"], rows)


def write_timing_csv(path: Path | str, report: TimingReport) -> Path:
    rows = [
        ["lookup", report.lookup_mean_ns, report.lookup_samples],
        ["layer_forward", report.forward_mean_ns, report.forward_samples],
        ["forward_over_lookup", report.forward_over_lookup, 0],
    ]
    return _write_csv(Path(path), ["quantity", "mean_ns", "n"], rows)


@dataclass
class MetricsReport:
    """Everything the report subcommand aggregates for one run."""

    num_examples: int
    num_layers: int
    engine_cdf: np.ndarray
    oracle_cdf: np.ndarray | None
    frozen_fraction: float
    frozen_accuracy: float | None
    overall_accuracy: float
    memory_per_layer: list[int]
    memory_total: int
    timing: TimingReport

    def summary_text(self) -> str:
        """Human summary. Deliberately free of wall-clock numbers so the
        file is byte-identical across reruns; timings live in timing.csv."""
        lines = [
            f"examples evaluated: {self.num_examples}",
            f"layers: {self.num_layers}",
            f"frozen before output layer: {100.0 * self.frozen_fraction:.2f}%",
            "frozen-only agreement with model: "
            + (
                f"{100.0 * self.frozen_accuracy:.2f}%"
                if self.frozen_accuracy is not None
                else "n/a (nothing froze)"
            ),
            f"overall agreement with model: {100.0 * self.overall_accuracy:.2f}%",
        ]
        for layer in range(self.num_layers):
            oracle = (
                f"{self.oracle_cdf[layer]:.4f}" if self.oracle_cdf is not None else "n/a"
            )
            lines.append(
                f"cdf layer {layer}: engine {self.engine_cdf[layer]:.4f} oracle {oracle}"
            )
        mem_mb = self.memory_total / 1e6
        lines.append(f"cache memory: {self.memory_total} bytes ({mem_mb:.3f} MB)")
        lines.append(
            "lookup/forward timing: see timing.csv"
            if self.timing.lookup_samples
            else "lookup/forward timing: not measured"
        )
        return "\n".join(lines) + "\n"


def build_metrics_report(
    engine_run: EvaluationRun,
    oracle_run: EvaluationRun | None,
    caches: list[LayerCache],
    timing: TimingReport | None = None,
) -> MetricsReport:
    frozen_only, overall = agreement_accuracy(engine_run)
    frozen = sum(1 for r in engine_run.results if r.frozen_layer is not None)
    per_layer, total = memory_bytes(caches)
    return MetricsReport(
        num_examples=len(engine_run.results),
        num_layers=engine_run.num_layers,
        engine_cdf=frozen_cdf(engine_run),
        oracle_cdf=frozen_cdf(oracle_run) if oracle_run is not None else None,
        frozen_fraction=frozen / len(engine_run.results),
        frozen_accuracy=frozen_only,
        overall_accuracy=overall,
        memory_per_layer=per_layer,
        memory_total=total,
        timing=timing if timing is not None else timing_report(engine_run),
    )
