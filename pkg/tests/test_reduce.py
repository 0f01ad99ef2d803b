import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freezecache import net
from freezecache.errors import FormatError
from freezecache.reduce import (
    Reducer,
    apply_reducer,
    classifier_accuracy,
    embed_one,
    gradient_check,
    load_reducer,
    load_reducers,
    save_reducer,
    save_reducers,
    train_reducer,
)
from freezecache.trace import forward_collect, generate_synthetic, train_reference_model

from conftest import build_pipeline


def _random_reducer(seed: int, input_dim=5, embed_dim=3, classes=4) -> Reducer:
    rng = np.random.default_rng(seed)
    return Reducer(
        layer_index=0,
        w1=rng.standard_normal((input_dim, embed_dim)).astype(np.float32).astype(np.float64),
        b1=rng.standard_normal(embed_dim).astype(np.float32).astype(np.float64),
        w2=rng.standard_normal((embed_dim, classes)).astype(np.float32).astype(np.float64),
        b2=rng.standard_normal(classes).astype(np.float32).astype(np.float64),
        seed=seed,
    )


def _trained_trace(seed=0):
    ds = generate_synthetic(3, 6, {"train": 150, "val": 50}, 12.0, seed=seed)
    model = train_reference_model(ds, (10, 6), epochs=20, lr=0.05, seed=seed)
    return forward_collect(model, ds)


def test_full_width_reducer_reaches_classifier_accuracy():
    ds = generate_synthetic(2, 4, {"train": 200}, 100.0, seed=1)
    model = train_reference_model(ds, (8, 6), epochs=25, lr=1e-3, seed=1)
    tr = forward_collect(model, ds)
    red = train_reducer(tr, 0, embed_dim=8, epochs=25, lr=1e-3, seed=1)
    assert red.train_accuracy >= 0.95


def test_zero_epoch_reducer_is_seeded_projection():
    tr = _trained_trace()
    r1 = train_reducer(tr, 0, embed_dim=4, epochs=0, lr=0.1, seed=3)
    r2 = train_reducer(tr, 0, embed_dim=4, epochs=0, lr=0.1, seed=3)
    assert np.array_equal(r1.w1, r2.w1)
    assert np.array_equal(r1.b1, r2.b1)
    init = net.init_params([10, 4, tr.num_classes], seed=3)
    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    assert np.array_equal(r1.w1, f32(init[0][0]))


def test_zero_parameters_give_zero_embedding():
    red = Reducer(
        layer_index=0,
        w1=np.zeros((4, 2)),
        b1=np.zeros(2),
        w2=np.zeros((2, 3)),
        b2=np.zeros(3),
        seed=0,
    )
    out = embed_one(red, np.array([5.0, -1.0, 2.0, 0.5]))
    assert np.array_equal(out, np.zeros(2, dtype=np.float32))


def test_embedding_matches_straight_line_recompute():
    red = _random_reducer(7)
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = rng.standard_normal(red.input_dim)
        got = embed_one(red, x)
        want = []
        for j in range(red.embed_dim):
            acc = float(red.b1[j])
            for i in range(red.input_dim):
                acc += float(x[i]) * float(red.w1[i, j])
            want.append(max(acc, 0.0))
        assert np.allclose(got, want, rtol=1e-6, atol=1e-6)
        assert got.dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_apply_reducer_batch_size_invariant(seed, n):
    red = _random_reducer(seed % 1000)
    rng = np.random.default_rng(seed)
    batch = rng.standard_normal((n, red.input_dim)).astype(np.float32)
    full = apply_reducer(red, batch)
    assert full.dtype == np.float32
    for i in range(n):
        row = apply_reducer(red, batch[i : i + 1])
        assert np.array_equal(full[i], row[0])
        assert np.array_equal(full[i], embed_one(red, batch[i]))


def test_identity_reducer_passes_through_as_f32():
    x = np.array([1.5, -2.25, 3.0], dtype=np.float64)
    out = embed_one(None, x)
    assert out.dtype == np.float32
    assert np.array_equal(out, x.astype(np.float32))
    mat = apply_reducer(None, np.stack([x, x]))
    assert np.array_equal(mat[0], out)


def test_gradient_check_small_nets():
    rng = np.random.default_rng(13)
    for seed in range(3):
        red = _random_reducer(seed, input_dim=6, embed_dim=3, classes=3)
        x = rng.standard_normal((8, 6))
        y = rng.integers(0, 3, size=8)
        assert gradient_check(red, x, y) < 1e-4


def test_gradients_zero_where_relu_inactive():
    red = _random_reducer(5, input_dim=4, embed_dim=3, classes=2)
    x = np.zeros((6, 4))
    y = np.zeros(6, dtype=np.int64)
    hidden = np.maximum(x @ red.w1 + red.b1, 0.0)
    _, grads = net.loss_and_grads(red.params, x, y)
    gw1 = grads[0][0]
    inactive = (hidden <= 0).all(axis=0)
    assert np.array_equal(gw1[:, inactive], np.zeros_like(gw1[:, inactive]))


def test_duplicated_rows_double_the_gradient():
    # sum reduction, so doubling rows doubles gradients; tolerance covers
    # BLAS picking different kernels for batch sizes 1 and 2
    red = _random_reducer(9, input_dim=5, embed_dim=3, classes=3)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 5))
    y = np.array([1])
    loss1, single = net.loss_and_grads(red.params, x, y)
    loss2, doubled = net.loss_and_grads(red.params, np.vstack([x, x]), np.array([1, 1]))
    assert loss2 == pytest.approx(2.0 * loss1, rel=1e-12)
    for (gw1, gb1), (gw2, gb2) in zip(single, doubled):
        assert np.allclose(gw2, 2.0 * gw1, rtol=1e-12, atol=0)
        assert np.allclose(gb2, 2.0 * gb1, rtol=1e-12, atol=0)


def test_embed_dim_cannot_exceed_input_dim():
    tr = _trained_trace()
    with pytest.raises(ValueError):
        train_reducer(tr, 0, embed_dim=11, epochs=1, lr=0.05, seed=0)
    with pytest.raises(ValueError):
        _random_reducer(0, input_dim=2, embed_dim=3)


def test_reducer_round_trip(tmp_path, small_pipeline):
    red = small_pipeline.reducers[0]
    path = save_reducer(red, tmp_path / "reducer_layer0.red")
    back = load_reducer(path, layer_index=0)
    assert np.array_equal(back.w1, red.w1)
    assert np.array_equal(back.b1, red.b1)
    assert np.array_equal(back.w2, red.w2)
    assert np.array_equal(back.b2, red.b2)
    x = np.arange(red.input_dim, dtype=np.float64)
    assert np.array_equal(embed_one(back, x), embed_one(red, x))


def test_reducer_directory_round_trip(tmp_path, small_pipeline):
    paths = save_reducers(small_pipeline.reducers, tmp_path)
    assert len(paths) == len(small_pipeline.reducers)
    back = load_reducers(tmp_path)
    assert set(back) == set(small_pipeline.reducers)


def test_reducer_truncated_file_rejected(tmp_path, small_pipeline):
    path = save_reducer(small_pipeline.reducers[0], tmp_path / "r.red")
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(FormatError):
        load_reducer(path)


def test_reducer_bad_magic_rejected(tmp_path, small_pipeline):
    path = save_reducer(small_pipeline.reducers[0], tmp_path / "r.red")
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_reducer(path)


def test_classifier_accuracy_on_training_split(small_pipeline):
    tr = small_pipeline.trace
    data = tr.splits["train"]
    red = small_pipeline.reducers[0]
    acc = classifier_accuracy(red, data.activations[0], data.model_labels)
    assert acc == red.train_accuracy
    assert acc >= 0.9
