"""Command-line pipeline.

Subcommands share one output directory: synth-traces writes a trace,
train-reduce fits per-layer reducers, build-cache builds the caches,
thresholds calibrates the freeze bars, infer/oracle replay a split, and
sweep/purity/memory/report emit the measurement CSVs. Each subcommand also
writes a ``manifest_<name>.json`` recording the config echo, the seed, and
a sha256 per artifact (timing files are listed unhashed; they are the only
artifacts that legitimately change between identical runs).

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import cache as cache_mod
from . import engine as engine_mod
from . import metrics as metrics_mod
from . import reduce as reduce_mod
from . import threshold as threshold_mod
from . import trace as trace_mod
from .config import (
    _BOOL_FIELDS,
    FIELD_PARSERS,
    ExperimentConfig,
    build_config,
    config_as_dict,
    read_config_file,
)
from .errors import ConfigurationError, FormatError, TrainingDivergedError


class _UsageError(Exception):
    pass


# Distinguishes "flag not given" from legitimate None values like
# --enabled-layers all.
_UNSET = object()


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: A003 - argparse API
        raise _UsageError(message)


_FLAG_HELP = {
    "seed": "master seed for data, training, and clustering",
    "out_dir": "output directory shared by the pipeline stages",
    "trace_dir": "trace directory (default: <out_dir>/trace)",
    "threads": "worker threads for replay; 0 uses all cores",
    "classes": "number of synthetic classes",
    "input_dim": "synthetic input dimensionality",
    "separation": "radius of the sphere the class means sit on",
    "train_count": "synthetic train split size",
    "val_count": "synthetic validation split size",
    "test_count": "synthetic test split size",
    "widths": "comma-separated hidden layer widths",
    "model_epochs": "reference model training epochs",
    "model_lr": "reference model learning rate",
    "batch_size": "SGD mini-batch size",
    "reduce": "apply trained reducers (--no-reduce uses raw activations)",
    "embed_dim": "reducer embedding width, clamped to each layer's width",
    "reducer_epochs": "reducer training epochs",
    "reducer_lr": "reducer learning rate",
    "cache_mode": "cache variant: knn or kmeans",
    "k": "neighbors consulted per KNN lookup",
    "clusters": "centroid count for kmeans caches",
    "enabled_layers": "comma-separated layer indices allowed to freeze, or 'all'",
    "lam": "threshold scale applied at inference time",
    "lam_grid": "comma-separated threshold scales for the sweep",
    "split": "trace split to replay",
    "measure_forward": "also measure per-layer forward cost when the model file exists",
    "purity_clusters": "cluster count for purity (0 falls back to --clusters)",
    "purity_split": "trace split to cluster for purity",
    "purity_raw": "cluster raw activations instead of reduced embeddings",
    "purity_layers": "comma-separated layer indices for purity, or 'all'",
}

_SUBCOMMAND_FIELDS = {
    "synth-traces": [
        "classes", "input_dim", "separation", "train_count", "val_count",
        "test_count", "widths", "model_epochs", "model_lr", "batch_size",
    ],
    "train-reduce": ["embed_dim", "reducer_epochs", "reducer_lr", "batch_size"],
    "build-cache": ["cache_mode", "k", "clusters", "reduce"],
    "thresholds": ["enabled_layers", "reduce"],
    "infer": ["split", "lam", "measure_forward", "reduce"],
    "oracle": ["split", "reduce"],
    "sweep": ["lam_grid", "split", "reduce"],
    "purity": ["purity_clusters", "purity_split", "purity_raw", "purity_layers", "clusters"],
    "memory": [],
    "report": [],
}

_COMMON_FIELDS = ["seed", "out_dir", "trace_dir", "threads"]


def _add_field_flag(parser: argparse.ArgumentParser, name: str) -> None:
    flag = "--" + name.replace("_", "-")
    if name in _BOOL_FIELDS:
        parser.add_argument(
            flag, dest=name, action=argparse.BooleanOptionalAction, default=_UNSET,
            help=_FLAG_HELP[name],
        )
    else:
        parser.add_argument(
            flag, dest=name, type=FIELD_PARSERS[name], default=_UNSET,
            help=_FLAG_HELP[name], metavar="V",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="freezecache",
        description="Early-exit inference via per-layer approximate activation caches.",
    )
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    defaults = ExperimentConfig()
    for name, handler in _HANDLERS.items():
        p = sub.add_parser(
            name,
            help=handler.__doc__.splitlines()[0] if handler.__doc__ else None,
            description=handler.__doc__,
            epilog="Defaults: " + ", ".join(
                f"{f}={getattr(defaults, f)}"
                for f in _COMMON_FIELDS + _SUBCOMMAND_FIELDS[name]
            ),
        )
        p.add_argument("--config", type=str, default=None, metavar="FILE",
                       help="key = value config file; flags override it")
        for field in _COMMON_FIELDS + _SUBCOMMAND_FIELDS[name]:
            _add_field_flag(p, field)
        p.set_defaults(func=handler, subcommand=name)
    return parser


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(
    cfg: ExperimentConfig,
    subcommand: str,
    artifacts: list[Path],
    unhashed: list[Path] | None = None,
) -> Path:
    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "subcommand": subcommand,
        "seed": cfg.seed,
        "config": config_as_dict(cfg),
        "artifacts": {
            str(p.relative_to(out) if p.is_relative_to(out) else p): _sha256(p)
            for p in sorted(artifacts)
        },
        "artifacts_unhashed": [
            str(p.relative_to(out) if p.is_relative_to(out) else p)
            for p in sorted(unhashed or [])
        ],
    }
    path = out / f"manifest_{subcommand.replace('-', '_')}.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise ConfigurationError(
            f"{what} not found at {path}; run `freezecache {hint}` first"
        )
    return path


def _load_trace(cfg: ExperimentConfig) -> trace_mod.ActivationTrace:
    _require(cfg.trace_path / "manifest.json", "trace", "synth-traces")
    return trace_mod.read_trace(cfg.trace_path)


def _load_reducers(cfg: ExperimentConfig, trace: trace_mod.ActivationTrace):
    if not cfg.reduce:
        return {layer.index: None for layer in trace.layers}
    reducers = reduce_mod.load_reducers(cfg.out_path)
    missing = [l.index for l in trace.layers if l.index not in reducers]
    if missing:
        raise ConfigurationError(
            f"no reducers for layers {missing} in {cfg.out_path}; "
            "run `freezecache train-reduce` first (or pass --no-reduce)"
        )
    return reducers


def _load_caches(cfg: ExperimentConfig) -> list[cache_mod.LayerCache]:
    caches = cache_mod.load_caches(cfg.out_path)
    if not caches:
        raise ConfigurationError(
            f"no caches found in {cfg.out_path}; run `freezecache build-cache` first"
        )
    return caches


def _load_table(cfg: ExperimentConfig) -> threshold_mod.ThresholdTable:
    path = _require(cfg.out_path / "thresholds.json", "threshold table", "thresholds")
    return threshold_mod.load_thresholds(path)


def cmd_synth_traces(cfg: ExperimentConfig) -> None:
    """Generate synthetic blobs, train the reference model, write the trace."""
    counts = {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.test_count}
    dataset = trace_mod.generate_synthetic(
        cfg.classes, cfg.input_dim, counts, cfg.separation, cfg.seed
    )
    model = trace_mod.train_reference_model(
        dataset, cfg.widths, cfg.model_epochs, cfg.model_lr, cfg.seed,
        batch_size=cfg.batch_size,
    )
    tr = trace_mod.forward_collect(model, dataset)
    manifest_path = trace_mod.write_trace(tr, cfg.trace_path)
    cfg.out_path.mkdir(parents=True, exist_ok=True)
    model_path = trace_mod.save_ref_model(model, cfg.out_path / "refmodel.fzm")
    artifacts = sorted(cfg.trace_path.iterdir()) + [model_path]
    _write_manifest(cfg, "synth-traces", artifacts)
    print(
        f"trace written to {cfg.trace_path} "
        f"(train accuracy {model.train_accuracy:.4f})"
    )
    _ = manifest_path


def cmd_train_reduce(cfg: ExperimentConfig) -> None:
    """Train one reducer per layer on (activation, model label) pairs."""
    tr = _load_trace(cfg)
    reducers = {}
    for layer in tr.layers:
        embed_dim = min(cfg.embed_dim, layer.dim)
        reducers[layer.index] = reduce_mod.train_reducer(
            tr, layer.index, embed_dim, cfg.reducer_epochs, cfg.reducer_lr,
            seed=cfg.seed + layer.index, batch_size=cfg.batch_size,
        )
    paths = reduce_mod.save_reducers(reducers, cfg.out_path)
    _write_manifest(cfg, "train-reduce", paths)
    accs = ", ".join(
        f"layer {i}: {reducers[i].train_accuracy:.3f}" for i in sorted(reducers)
    )
    print(f"trained {len(paths)} reducers ({accs})")


def cmd_build_cache(cfg: ExperimentConfig) -> None:
    """Build per-layer caches from the train split."""
    tr = _load_trace(cfg)
    reducers = _load_reducers(cfg, tr)
    if cfg.cache_mode == "knn":
        caches = cache_mod.construct_knn_cache(tr, reducers, k=cfg.k)
    else:
        caches = cache_mod.construct_centroid_cache(
            tr, reducers, n_clusters=cfg.clusters, seed=cfg.seed
        )
    paths = cache_mod.save_caches(caches, cfg.out_path)
    _write_manifest(cfg, "build-cache", paths)
    _, total = cache_mod.memory_bytes(caches)
    print(f"built {len(caches)} {cfg.cache_mode} caches ({total} bytes)")


def cmd_thresholds(cfg: ExperimentConfig) -> None:
    """Calibrate per-layer freeze thresholds on the validation split."""
    tr = _load_trace(cfg)
    reducers = _load_reducers(cfg, tr)
    caches = _load_caches(cfg)
    table = threshold_mod.compute_thresholds(caches, reducers, tr, split="val")
    if cfg.enabled_layers is not None:
        table = threshold_mod.set_enabled_layers(table, cfg.enabled_layers)
    path = threshold_mod.save_thresholds(table, cfg.out_path / "thresholds.json")
    _write_manifest(cfg, "thresholds", [path])
    print("thresholds: " + ", ".join(f"{t:.6g}" for t in table.thresholds))


def cmd_infer(cfg: ExperimentConfig) -> None:
    """Replay a split through the freeze engine and record every example."""
    tr = _load_trace(cfg)
    reducers = _load_reducers(cfg, tr)
    caches = _load_caches(cfg)
    table = threshold_mod.scale_thresholds(_load_table(cfg), cfg.lam)
    run = engine_mod.batch_evaluate(
        tr, cfg.split, caches, reducers, table,
        mode="engine", threads=cfg.effective_threads(),
    )
    records_path = engine_mod.write_records(run, cfg.out_path / "records_engine.jsonl")
    model_path = cfg.out_path / "refmodel.fzm"
    if cfg.measure_forward and model_path.is_file():
        model = trace_mod.load_ref_model(model_path)
        run.timing.merge(engine_mod.measure_forward_times(model, seed=cfg.seed))
    timing_path = cfg.out_path / "timing_raw.json"
    timing_path.write_text(
        json.dumps(
            {
                "lookup_total_ns": run.timing.lookup_total_ns.tolist(),
                "lookup_count": run.timing.lookup_count.tolist(),
                "forward_total_ns": run.timing.forward_total_ns.tolist(),
                "forward_count": run.timing.forward_count.tolist(),
            }
        )
        + "\n"
    )
    _write_manifest(cfg, "infer", [records_path], unhashed=[timing_path])
    frozen = sum(1 for r in run.results if r.frozen_layer is not None)
    frozen_only, overall = metrics_mod.agreement_accuracy(run)
    frozen_txt = f"{frozen_only:.4f}" if frozen_only is not None else "n/a"
    print(
        f"{cfg.split}: froze {frozen}/{len(run.results)} "
        f"(frozen-only agreement {frozen_txt}, overall {overall:.4f})"
    )


def cmd_oracle(cfg: ExperimentConfig) -> None:
    """Replay a split with the oracle rule (freeze at first agreement)."""
    tr = _load_trace(cfg)
    reducers = _load_reducers(cfg, tr)
    caches = _load_caches(cfg)
    run = engine_mod.batch_evaluate(
        tr, cfg.split, caches, reducers, None,
        mode="oracle", threads=cfg.effective_threads(),
    )
    path = engine_mod.write_records(run, cfg.out_path / "records_oracle.jsonl")
    _write_manifest(cfg, "oracle", [path])
    frozen = sum(1 for r in run.results if r.frozen_layer is not None)
    print(f"{cfg.split}: oracle froze {frozen}/{len(run.results)}")


def cmd_sweep(cfg: ExperimentConfig) -> None:
    """Replay the split once per threshold scale and tabulate the trade-off."""
    tr = _load_trace(cfg)
    reducers = _load_reducers(cfg, tr)
    caches = _load_caches(cfg)
    table = _load_table(cfg)
    points = metrics_mod.sweep(
        tr, cfg.split, caches, reducers, table, cfg.lam_grid,
        threads=cfg.effective_threads(),
    )
    path = metrics_mod.write_sweep_csv(cfg.out_path / "sweep.csv", points)
    _write_manifest(cfg, "sweep", [path])
    for p in points:
        acc = f"{p.frozen_accuracy:.4f}" if p.frozen_accuracy is not None else "n/a"
        print(f"lambda={p.lam:g}: frozen {p.frozen_pct:.2f}%, frozen-only acc {acc}")


def cmd_purity(cfg: ExperimentConfig) -> None:
    """Cluster layer activations and report majority-label fractions."""
    tr = _load_trace(cfg)
    reducers = None
    if not cfg.purity_raw and cfg.reduce:
        reducers = _load_reducers(cfg, tr)
    clusters = cfg.purity_clusters or cfg.clusters
    report = metrics_mod.purity_report(
        tr, clusters, cfg.seed,
        layer_indices=cfg.purity_layers, split=cfg.purity_split, reducers=reducers,
    )
    paths = metrics_mod.write_purity_csvs(cfg.out_path, report)
    _write_manifest(cfg, "purity", paths)
    for lp in report.layers:
        print(f"layer {lp.layer_index}: mean majority fraction {lp.mean_fraction:.4f}")


def cmd_memory(cfg: ExperimentConfig) -> None:
    """Tabulate cache memory per layer."""
    caches = _load_caches(cfg)
    path = metrics_mod.write_memory_csv(cfg.out_path / "memory.csv", caches)
    _write_manifest(cfg, "memory", [path])
    _, total = cache_mod.memory_bytes(caches)
    print(f"total cache bytes: {total}")


def cmd_report(cfg: ExperimentConfig) -> None:
    """Aggregate records into cdf.csv, memory.csv, timing.csv, summary.txt."""
    caches = _load_caches(cfg)
    records_path = _require(
        cfg.out_path / "records_engine.jsonl", "engine records", "infer"
    )
    engine_run = engine_mod.read_records(records_path, len(caches), mode="engine")
    oracle_path = cfg.out_path / "records_oracle.jsonl"
    oracle_run = (
        engine_mod.read_records(oracle_path, len(caches), mode="oracle")
        if oracle_path.is_file()
        else None
    )
    timing_path = cfg.out_path / "timing_raw.json"
    timing = None
    if timing_path.is_file():
        try:
            raw = json.loads(timing_path.read_text())
            stats = engine_mod.TimingStats(
                np.asarray(raw["lookup_total_ns"], dtype=np.int64),
                np.asarray(raw["lookup_count"], dtype=np.int64),
                np.asarray(raw["forward_total_ns"], dtype=np.int64),
                np.asarray(raw["forward_count"], dtype=np.int64),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"{timing_path}: {exc}") from exc
        timing = metrics_mod.timing_report(
            engine_mod.EvaluationRun([], len(caches), "engine", stats)
        )
    report = metrics_mod.build_metrics_report(engine_run, oracle_run, caches, timing)
    cdf_path = metrics_mod.write_cdf_csv(
        cfg.out_path / "cdf.csv", report.engine_cdf, report.oracle_cdf
    )
    memory_path = metrics_mod.write_memory_csv(cfg.out_path / "memory.csv", caches)
    timing_csv = metrics_mod.write_timing_csv(cfg.out_path / "timing.csv", report.timing)
    summary_path = cfg.out_path / "summary.txt"
    summary_path.write_text(report.summary_text())
    _write_manifest(
        cfg, "report", [cdf_path, memory_path, summary_path], unhashed=[timing_csv]
    )
    print(report.summary_text(), end="")


_HANDLERS = {
    "synth-traces": cmd_synth_traces,
    "train-reduce": cmd_train_reduce,
    "build-cache": cmd_build_cache,
    "thresholds": cmd_thresholds,
    "infer": cmd_infer,
    "oracle": cmd_oracle,
    "sweep": cmd_sweep,
    "purity": cmd_purity,
    "memory": cmd_memory,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if not getattr(args, "func", None):
        parser.print_help()
        return 1
    try:
        file_values = read_config_file(args.config) if args.config else None
        overrides = {
            name: getattr(args, name)
            for name in FIELD_PARSERS
            if getattr(args, name, _UNSET) is not _UNSET
        }
        cfg = build_config(file_values, overrides)
        args.func(cfg)
        return 0
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
