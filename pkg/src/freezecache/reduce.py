"""Per-layer dimensionality reduction.

A reducer is a one-hidden-layer softmax classifier trained to predict the
reference model's own labels from a layer's activations; the hidden ReLU
post-activation is the embedding used for cache lookups. ``None`` stands
for the identity (reduction disabled for that layer).

On disk: ``reducer_layer<k>.red`` is magic ``FZRD``, version u32, three
u64 dims (input, embed, classes), then float32 parameter blocks in order
w1 (input x embed, row-major), b1, w2 (embed x classes), b2, all
little-endian. Parameters are rounded through float32 when the reducer is
built, so the in-memory object and its file are bit-identical.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net
from .errors import FormatError
from .trace import ActivationTrace

REDUCER_MAGIC = b"FZRD"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<IQQQ")  # version, input_dim, embed_dim, num_classes
_FILE_RE = re.compile(r"reducer_layer(\d+)\.red$")


def _f32_exact(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value but keep float64 storage."""
    return arr.astype(np.float32).astype(np.float64)


@dataclass
class Reducer:
    layer_index: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"
    seed: int | None = None
    train_accuracy: float | None = None

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    def __post_init__(self) -> None:
        if self.embed_dim > self.input_dim:
            raise ValueError(
                f"embed_dim {self.embed_dim} exceeds input_dim {self.input_dim}"
            )
        for name, arr in (("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"reducer parameter {name} is not finite")
        if self.b1.shape != (self.embed_dim,):
            raise ValueError("b1 shape mismatch")
        if self.w2.shape[0] != self.embed_dim or self.b2.shape != (self.num_classes,):
            raise ValueError("classifier head shape mismatch")

    @property
    def params(self) -> net.Params:
        return [(self.w1, self.b1), (self.w2, self.b2)]


def embed_one(reducer: Reducer | None, vec: np.ndarray) -> np.ndarray:
    """Embedding for one activation vector, as float32.

    This is the single code path used by cache construction, threshold
    calibration, and the engine, so all three see identical values.
    """
    vec = np.asarray(vec)
    if vec.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {vec.shape}")
    if reducer is None:
        return vec.astype(np.float32)
    if vec.shape[0] != reducer.input_dim:
        raise ValueError(
            f"vector dim {vec.shape[0]} != reducer input dim {reducer.input_dim}"
        )
    h = net.affine_relu(vec.astype(np.float64), reducer.w1, reducer.b1)
    return h.astype(np.float32)


def apply_reducer(reducer: Reducer | None, matrix: np.ndarray) -> np.ndarray:
    """Row-wise embedding of a matrix of activations.

    Implemented as a row loop over embed_one so batched and single
    application are bit-identical.
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {matrix.shape}")
    embed_dim = matrix.shape[1] if reducer is None else reducer.embed_dim
    out = np.empty((matrix.shape[0], embed_dim), dtype=np.float32)
    for i in range(matrix.shape[0]):
        out[i] = embed_one(reducer, matrix[i])
    return out


def train_reducer(
    trace: ActivationTrace,
    layer_index: int,
    embed_dim: int,
    epochs: int,
    lr: float,
    seed: int,
    split: str = "train",
    batch_size: int = 32,
) -> Reducer:
    """Trains one layer's reducer on (activation -> model label) pairs.

    Zero epochs yields a deterministic seeded random projection.
    """
    if not 0 <= layer_index < trace.num_layers:
        raise ValueError(f"layer_index {layer_index} out of range")
    if split not in trace.splits:
        raise ValueError(f"trace has no split {split!r}")
    data = trace.splits[split]
    if data.num_examples == 0:
        raise ValueError(f"split {split!r} is empty")
    input_dim = trace.layers[layer_index].dim
    if not 1 <= embed_dim <= input_dim:
        raise ValueError(
            f"embed_dim must be in [1, {input_dim}], got {embed_dim}"
        )
    x = data.activations[layer_index]
    y = data.model_labels
    params = net.init_params([input_dim, embed_dim, trace.num_classes], seed)
    params = net.train_sgd(
        params, x, y, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed
    )
    (w1, b1), (w2, b2) = params
    w1, b1, w2, b2 = (_f32_exact(a) for a in (w1, b1, w2, b2))
    acc = net.accuracy([(w1, b1), (w2, b2)], x, y)
    return Reducer(layer_index, w1, b1, w2, b2, seed=seed, train_accuracy=acc)


def classifier_accuracy(reducer: Reducer, x: np.ndarray, y: np.ndarray) -> float:
    """Accuracy of the reducer's classifier head on (activations, labels)."""
    return net.accuracy(reducer.params, x, y)


def gradient_check(
    reducer: Reducer,
    x: np.ndarray,
    y: np.ndarray,
    step: float = 1e-6,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences of the loss, in float64. Cheap only for small dims."""
    params = [
        (reducer.w1.copy(), reducer.b1.copy()),
        (reducer.w2.copy(), reducer.b2.copy()),
    ]
    _, analytic = net.loss_and_grads(params, x, y)
    worst = 0.0
    for li, (w, b) in enumerate(params):
        for arr, grad in ((w, analytic[li][0]), (b, analytic[li][1])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + step
                hi = net.loss(params, x, y)
                arr[idx] = orig - step
                lo = net.loss(params, x, y)
                arr[idx] = orig
                numeric = (hi - lo) / (2.0 * step)
                denom = max(abs(float(grad[idx])), abs(numeric), 1e-8)
                worst = max(worst, abs(float(grad[idx]) - numeric) / denom)
    return worst


def save_reducer(reducer: Reducer, path: Path | str) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(REDUCER_MAGIC)
        fh.write(
            _HEADER.pack(
                FORMAT_VERSION, reducer.input_dim, reducer.embed_dim, reducer.num_classes
            )
        )
        for arr in (reducer.w1, reducer.b1, reducer.w2, reducer.b2):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_reducer(path: Path | str, layer_index: int | None = None) -> Reducer:
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
    if data[:4] != REDUCER_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, input_dim, embed_dim, num_classes = _HEADER.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    sizes = (input_dim * embed_dim, embed_dim, embed_dim * num_classes, num_classes)
    expected = header_len + 4 * sum(sizes)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    offset = header_len
    blocks = []
    for size in sizes:
        blocks.append(
            np.frombuffer(data, dtype="<f4", count=size, offset=offset).astype(np.float64)
        )
        offset += 4 * size
    w1 = blocks[0].reshape(input_dim, embed_dim)
    w2 = blocks[2].reshape(embed_dim, num_classes)
    try:
        return Reducer(layer_index, w1, blocks[1], w2, blocks[3])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_reducers(reducers: dict[int, Reducer], directory: Path | str) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer_index in sorted(reducers):
        reducer = reducers[layer_index]
        if reducer is None:
            continue
        paths.append(
            save_reducer(reducer, directory / f"reducer_layer{layer_index}.red")
        )
    return paths


def load_reducers(directory: Path | str) -> dict[int, Reducer]:
    directory = Path(directory)
    reducers: dict[int, Reducer] = {}
    for path in sorted(directory.glob("reducer_layer*.red")):
        reducer = load_reducer(path)
        reducers[reducer.layer_index] = reducer
    return reducers
