"""Experiment configuration shared by every CLI subcommand.

Values merge in precedence order: dataclass defaults, then a plain
``key = value`` config file (``#`` starts a comment), then explicit
command-line flags. Every key below is also a flag; defaults shown here
are what ``--help`` documents.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _int_tuple(raw: str) -> tuple[int, ...]:
    parts = [p for p in raw.replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _float_tuple(raw: str) -> tuple[float, ...]:
    parts = [p for p in raw.replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(p) for p in parts)


def _layer_set(raw: str) -> tuple[int, ...] | None:
    if raw.strip().lower() == "all":
        return None
    return _int_tuple(raw)


def _cache_mode(raw: str) -> str:
    mode = raw.strip().lower()
    if mode not in ("knn", "kmeans"):
        raise ValueError(f"cache_mode must be knn or kmeans, got {raw!r}")
    return mode


@dataclass
class ExperimentConfig:
    seed: int = 42
    out_dir: str = "runs/default"
    trace_dir: str | None = None  # defaults to <out_dir>/trace
    threads: int = 0  # 0 means all cores

    # synthetic data
    classes: int = 5
    input_dim: int = 16
    separation: float = 10.0
    train_count: int = 1200
    val_count: int = 400
    test_count: int = 400

    # reference model
    widths: tuple[int, ...] = (32, 24, 16, 8)
    model_epochs: int = 30
    model_lr: float = 0.05
    batch_size: int = 32

    # reducers (embed_dim is clamped to each layer's width)
    reduce: bool = True
    embed_dim: int = 32
    reducer_epochs: int = 20
    reducer_lr: float = 0.05

    # caches
    cache_mode: str = "knn"
    k: int = 5
    clusters: int = 200

    # thresholds and engine
    enabled_layers: tuple[int, ...] | None = None  # None means all
    lam: float = 1.0
    lam_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 4.0)
    split: str = "test"
    measure_forward: bool = True

    # purity
    purity_clusters: int = 0  # 0 falls back to `clusters`
    purity_split: str = "train"
    purity_raw: bool = False
    purity_layers: tuple[int, ...] | None = None  # None means all

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @property
    def trace_path(self) -> Path:
        return Path(self.trace_dir) if self.trace_dir else self.out_path / "trace"

    def effective_threads(self) -> int:
        if self.threads > 0:
            return self.threads
        import os

        return os.cpu_count() or 1


# How each field parses from config-file / CLI strings.
FIELD_PARSERS: dict[str, Any] = {
    "seed": int,
    "out_dir": str,
    "trace_dir": str,
    "threads": int,
    "classes": int,
    "input_dim": int,
    "separation": float,
    "train_count": int,
    "val_count": int,
    "test_count": int,
    "widths": _int_tuple,
    "model_epochs": int,
    "model_lr": float,
    "batch_size": int,
    "reduce": _bool,
    "embed_dim": int,
    "reducer_epochs": int,
    "reducer_lr": float,
    "cache_mode": _cache_mode,
    "k": int,
    "clusters": int,
    "enabled_layers": _layer_set,
    "lam": float,
    "lam_grid": _float_tuple,
    "split": str,
    "measure_forward": _bool,
    "purity_clusters": int,
    "purity_split": str,
    "purity_raw": _bool,
    "purity_layers": _layer_set,
}

_BOOL_FIELDS = {"reduce", "measure_forward", "purity_raw"}


def read_config_file(path: Path | str) -> dict[str, Any]:
    """Parses ``key = value`` lines into typed values; unknown keys fail."""
    path = Path(path)
    values: dict[str, Any] = {}
    for lineno, raw_line in enumerate(path.read_text().splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw_line!r}")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_PARSERS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = FIELD_PARSERS[key](raw_value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def build_config(
    file_values: dict[str, Any] | None, overrides: dict[str, Any]
) -> ExperimentConfig:
    """Layers file values under overrides. Callers pass only overrides the
    user actually supplied; None is a real value here (e.g. 'all' layers)."""
    merged: dict[str, Any] = {}
    if file_values:
        merged.update(file_values)
    merged.update(overrides)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**merged)


def config_as_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """JSON-friendly echo of the config, tuples as lists."""
    out: dict[str, Any] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out
