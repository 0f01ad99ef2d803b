import numpy as np
import pytest

from freezecache.cache import LayerCache, lookup
from freezecache.engine import (
    batch_evaluate,
    freeze_infer,
    freeze_infer_live,
    measure_forward_times,
    oracle_freeze,
    read_records,
    write_records,
)
from freezecache.reduce import embed_one
from freezecache.threshold import ThresholdTable, scale_thresholds
from freezecache.trace import ActivationTrace, SplitData


def single_entry_caches(labels_by_layer):
    # one-entry KNN caches so every lookup returns a chosen label
    return [
        LayerCache(
            layer_index=i,
            mode="knn",
            vectors=np.zeros((1, 2)),
            labels=np.array([label]),
            k=1,
        )
        for i, label in enumerate(labels_by_layer)
    ]


def test_never_freeze_with_infinite_thresholds(small_pipeline):
    tr = small_pipeline.trace
    data = tr.splits["test"]
    table = ThresholdTable.never_freeze(len(small_pipeline.caches))
    run = batch_evaluate(tr, "test", small_pipeline.caches, small_pipeline.reducers, table)
    for i, result in enumerate(run.results):
        assert result.frozen_layer is None
        assert result.label == int(data.model_labels[i])
        assert len(result.layer_records) == len(small_pipeline.caches)
        assert not any(rec.froze for rec in result.layer_records)


def test_training_example_freezes_on_itself_with_zero_thresholds(small_pipeline):
    tr = small_pipeline.trace
    data = tr.splits["train"]
    table = ThresholdTable.zeros(len(small_pipeline.caches))
    activations = [data.activations[li][0] for li in range(tr.num_layers)]
    result = freeze_infer(
        activations,
        int(data.model_labels[0]),
        small_pipeline.caches,
        small_pipeline.reducers,
        table,
    )
    assert result.frozen_layer == 0
    assert result.label == int(data.model_labels[0])
    assert len(result.layer_records) == 1


def test_zero_error_on_validation_replay(small_pipeline):
    run = batch_evaluate(
        small_pipeline.trace,
        "val",
        small_pipeline.caches,
        small_pipeline.reducers,
        small_pipeline.table,
    )
    violations = [
        r for r in run.results
        if r.frozen_layer is not None and r.label != r.model_label
    ]
    assert violations == []


def test_oracle_worked_example():
    caches = single_entry_caches([1, 0, 0, 0])  # lookups say B, A, A, A
    reducers = {i: None for i in range(4)}
    acts = [np.zeros(2, dtype=np.float32) for _ in range(4)]
    assert oracle_freeze(acts, caches, reducers, model_label=0) == 1


def test_oracle_no_agreement_returns_none():
    caches = single_entry_caches([1, 1, 1])
    reducers = {i: None for i in range(3)}
    acts = [np.zeros(2, dtype=np.float32) for _ in range(3)]
    assert oracle_freeze(acts, caches, reducers, model_label=0) is None


def test_oracle_dominates_correct_engine_freezes(small_pipeline):
    tr = small_pipeline.trace
    engine = batch_evaluate(
        tr, "test", small_pipeline.caches, small_pipeline.reducers, small_pipeline.table
    )
    oracle = batch_evaluate(
        tr, "test", small_pipeline.caches, small_pipeline.reducers, None, mode="oracle"
    )
    for er, orr in zip(engine.results, oracle.results):
        if er.frozen_layer is not None and er.label == er.model_label:
            assert orr.frozen_layer is not None
            assert orr.frozen_layer <= er.frozen_layer


def test_empty_split_gives_empty_run(small_pipeline):
    tr = small_pipeline.trace
    empty = ActivationTrace(
        tr.dataset_name,
        tr.num_classes,
        tr.layers,
        {
            "test": SplitData(
                [np.zeros((0, layer.dim), dtype=np.float32) for layer in tr.layers],
                np.zeros(0, dtype=np.int64),
            )
        },
    )
    run = batch_evaluate(
        empty, "test", small_pipeline.caches, small_pipeline.reducers, small_pipeline.table
    )
    assert run.results == []
    assert run.timing.lookup_count.sum() == 0


def test_batch_evaluate_deterministic(small_pipeline):
    args = (
        small_pipeline.trace,
        "test",
        small_pipeline.caches,
        small_pipeline.reducers,
        small_pipeline.table,
    )
    a = batch_evaluate(*args)
    b = batch_evaluate(*args)
    for ra, rb in zip(a.results, b.results):
        assert ra.frozen_layer == rb.frozen_layer
        assert ra.label == rb.label
        assert ra.confidence == rb.confidence


def test_threads_do_not_change_results(small_pipeline):
    args = (
        small_pipeline.trace,
        "test",
        small_pipeline.caches,
        small_pipeline.reducers,
        small_pipeline.table,
    )
    serial = batch_evaluate(*args, threads=1)
    threaded = batch_evaluate(*args, threads=4)
    assert len(serial.results) == len(threaded.results)
    for ra, rb in zip(serial.results, threaded.results):
        assert ra.example_id == rb.example_id
        assert ra.frozen_layer == rb.frozen_layer
        assert ra.label == rb.label
        assert ra.confidence == rb.confidence


def test_disabled_layers_are_skipped(small_pipeline):
    table = ThresholdTable(
        np.zeros(len(small_pipeline.caches)),
        np.array([False] + [True] * (len(small_pipeline.caches) - 1)),
    )
    tr = small_pipeline.trace
    data = tr.splits["test"]
    activations = [data.activations[li][0] for li in range(tr.num_layers)]
    result = freeze_infer(
        activations,
        int(data.model_labels[0]),
        small_pipeline.caches,
        small_pipeline.reducers,
        table,
    )
    first = result.layer_records[0]
    assert first.label is None and not first.froze
    assert result.frozen_layer == 1  # zero thresholds freeze at the next layer


def test_records_cover_exactly_visited_layers(small_pipeline):
    tr = small_pipeline.trace
    run = batch_evaluate(
        tr, "test", small_pipeline.caches, small_pipeline.reducers, small_pipeline.table
    )
    for result in run.results:
        if result.frozen_layer is None:
            assert len(result.layer_records) == len(small_pipeline.caches)
        else:
            assert len(result.layer_records) == result.frozen_layer + 1
            assert result.layer_records[-1].froze


def test_live_mode_matches_replay(small_pipeline):
    tr = small_pipeline.trace
    data = tr.splits["test"]
    x, _ = small_pipeline.dataset.splits["test"]
    run = batch_evaluate(
        tr, "test", small_pipeline.caches, small_pipeline.reducers, small_pipeline.table
    )
    for i in range(data.num_examples):
        live = freeze_infer_live(
            small_pipeline.model,
            x[i],
            small_pipeline.caches,
            small_pipeline.reducers,
            small_pipeline.table,
            example_id=i,
        )
        assert live.frozen_layer == run.results[i].frozen_layer
        assert live.label == run.results[i].label
        assert live.confidence == run.results[i].confidence


def test_live_mode_skips_model_label_when_frozen(small_pipeline):
    x, _ = small_pipeline.dataset.splits["test"]
    table = ThresholdTable.zeros(len(small_pipeline.caches))
    live = freeze_infer_live(
        small_pipeline.model,
        x[0],
        small_pipeline.caches,
        small_pipeline.reducers,
        table,
    )
    assert live.frozen_layer == 0
    assert live.model_label is None  # later layers never ran


def test_lambda_scaling_monotone_on_replay(small_pipeline):
    tr = small_pipeline.trace
    frozen_counts = []
    for lam in (0.5, 2.0):
        table = scale_thresholds(small_pipeline.table, lam)
        run = batch_evaluate(
            tr, "test", small_pipeline.caches, small_pipeline.reducers, table
        )
        frozen_counts.append(
            sum(1 for r in run.results if r.frozen_layer is not None)
        )
    assert frozen_counts[0] >= frozen_counts[1]


def test_freeze_set_is_subset_under_larger_lambda(small_pipeline):
    tr = small_pipeline.trace
    runs = {}
    for lam in (0.5, 2.0):
        table = scale_thresholds(small_pipeline.table, lam)
        runs[lam] = batch_evaluate(
            tr, "test", small_pipeline.caches, small_pipeline.reducers, table
        )
    tight = {
        (r.example_id, r.frozen_layer)
        for r in runs[2.0].results
        if r.frozen_layer is not None
    }
    loose_by_id = {
        r.example_id: r.frozen_layer
        for r in runs[0.5].results
        if r.frozen_layer is not None
    }
    for example_id, layer in tight:
        assert example_id in loose_by_id
        assert loose_by_id[example_id] <= layer


def test_records_round_trip(tmp_path, small_pipeline):
    run = batch_evaluate(
        small_pipeline.trace,
        "test",
        small_pipeline.caches,
        small_pipeline.reducers,
        small_pipeline.table,
    )
    path = write_records(run, tmp_path / "records_engine.jsonl")
    back = read_records(path, run.num_layers)
    assert len(back.results) == len(run.results)
    for ra, rb in zip(run.results, back.results):
        assert ra.example_id == rb.example_id
        assert ra.frozen_layer == rb.frozen_layer
        assert ra.label == rb.label
        assert ra.model_label == rb.model_label
        assert ra.confidence == rb.confidence


def test_measure_forward_times_counts(small_pipeline):
    stats = measure_forward_times(small_pipeline.model, repeats=10, seed=0)
    assert stats.forward_count.tolist() == [10] * len(small_pipeline.model.hidden_widths)
    assert (stats.forward_total_ns >= 0).all()
    assert stats.lookup_count.sum() == 0


def test_engine_mode_requires_table(small_pipeline):
    with pytest.raises(ValueError):
        batch_evaluate(
            small_pipeline.trace,
            "test",
            small_pipeline.caches,
            small_pipeline.reducers,
            None,
            mode="engine",
        )
    with pytest.raises(ValueError):
        batch_evaluate(
            small_pipeline.trace,
            "nope",
            small_pipeline.caches,
            small_pipeline.reducers,
            small_pipeline.table,
        )


def test_lookup_consistency_between_engine_and_direct(small_pipeline):
    # the engine's per-layer confidence equals a direct embed+lookup
    tr = small_pipeline.trace
    data = tr.splits["test"]
    run = batch_evaluate(
        tr, "test", small_pipeline.caches, small_pipeline.reducers, small_pipeline.table
    )
    result = run.results[0]
    for rec in result.layer_records:
        cache = small_pipeline.caches[rec.layer]
        reducer = small_pipeline.reducers[cache.layer_index]
        direct = lookup(
            cache, embed_one(reducer, data.activations[cache.layer_index][0])
        )
        assert rec.label == direct.label
        assert rec.confidence == direct.confidence
