"""Shared pipeline fixtures.

``small_pipeline`` is an in-memory build sized for unit tests.
``default_run`` drives the actual CLI handlers with stock settings into a
session temp directory; the end-to-end tests replay its artifacts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from freezecache import cli
from freezecache.cache import LayerCache, construct_knn_cache, load_caches
from freezecache.config import ExperimentConfig
from freezecache.reduce import Reducer, load_reducers, train_reducer
from freezecache.threshold import ThresholdTable, compute_thresholds, load_thresholds
from freezecache.trace import (
    ActivationTrace,
    RawDataset,
    RefModel,
    forward_collect,
    generate_synthetic,
    load_ref_model,
    read_trace,
    train_reference_model,
)


@dataclass
class Pipeline:
    dataset: RawDataset
    model: RefModel
    trace: ActivationTrace
    reducers: dict[int, Reducer | None]
    caches: list[LayerCache]
    table: ThresholdTable
    build_seconds: float


def build_pipeline(
    classes: int = 3,
    input_dim: int = 8,
    separation: float = 12.0,
    counts: dict[str, int] | None = None,
    widths: tuple[int, ...] = (16, 8),
    seed: int = 0,
    embed_dim: int = 8,
    k: int = 5,
    epochs: int = 25,
    lr: float = 0.05,
) -> Pipeline:
    counts = counts or {"train": 300, "val": 120, "test": 120}
    start = time.perf_counter()
    dataset = generate_synthetic(classes, input_dim, counts, separation, seed)
    model = train_reference_model(dataset, widths, epochs, lr, seed)
    trace = forward_collect(model, dataset)
    reducers: dict[int, Reducer | None] = {
        layer.index: train_reducer(
            trace, layer.index, min(embed_dim, layer.dim), epochs, lr,
            seed=seed + layer.index,
        )
        for layer in trace.layers
    }
    caches = construct_knn_cache(trace, reducers, k=k)
    table = compute_thresholds(caches, reducers, trace, split="val")
    return Pipeline(
        dataset, model, trace, reducers, caches, table,
        time.perf_counter() - start,
    )


@pytest.fixture(scope="session")
def small_pipeline() -> Pipeline:
    return build_pipeline()


@dataclass
class DefaultRun:
    cfg: ExperimentConfig
    trace: ActivationTrace
    model: RefModel
    reducers: dict[int, Reducer | None]
    caches: list[LayerCache]
    table: ThresholdTable
    build_seconds: float


@pytest.fixture(scope="session")
def default_run(tmp_path_factory) -> DefaultRun:
    out = tmp_path_factory.mktemp("default_run") / "run"
    cfg = ExperimentConfig(out_dir=str(out))
    assert cfg.seed == 42  # stock settings are part of the contract
    start = time.perf_counter()
    cli.cmd_synth_traces(cfg)
    cli.cmd_train_reduce(cfg)
    cli.cmd_build_cache(cfg)
    cli.cmd_thresholds(cfg)
    elapsed = time.perf_counter() - start
    return DefaultRun(
        cfg=cfg,
        trace=read_trace(cfg.trace_path),
        model=load_ref_model(cfg.out_path / "refmodel.fzm"),
        reducers=load_reducers(cfg.out_path),
        caches=load_caches(cfg.out_path),
        table=load_thresholds(cfg.out_path / "thresholds.json"),
        build_seconds=elapsed,
    )


def rng_state(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
