"""Activation traces: the data model, the on-disk format, synthetic data,
and a small reference network so the whole pipeline runs without any
external framework.

A trace directory holds ``manifest.json`` plus one ``<split>_layer<k>.act``
blob per split and layer and ``<split>_model_labels.lbl`` /
``<split>_true_labels.lbl`` label files. Activation blobs are magic
``FZTR``, version u32, count u64, dim u64, then row-major float32, all
little-endian. Label files are magic ``FZLB``, version u32, count u64,
then u32 labels. Convolutional tensors imported from elsewhere are
flattened channel-major (C, then H, then W); the manifest records that
convention as ``flatten_order``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import net
from .errors import FormatError

TRACE_MAGIC = b"FZTR"
LABEL_MAGIC = b"FZLB"
FORMAT_VERSION = 1
MODEL_MAGIC = b"FZRM"

_TRACE_HEADER = struct.Struct("<IQQ")  # version, rows, dim (after magic)
_LABEL_HEADER = struct.Struct("<IQ")  # version, count (after magic)


@dataclass(frozen=True)
class LayerMeta:
    index: int
    name: str
    dim: int


@dataclass
class SplitData:
    """Per-layer activation matrices plus label vectors for one split."""

    activations: list[np.ndarray]
    model_labels: np.ndarray
    true_labels: np.ndarray | None = None

    @property
    def num_examples(self) -> int:
        return int(self.model_labels.shape[0])


@dataclass
class ActivationTrace:
    dataset_name: str
    num_classes: int
    layers: list[LayerMeta]
    splits: dict[str, SplitData]
    flatten_order: str = "chw"

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        """Raises ValueError when a structural invariant is broken."""
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.layers:
            raise ValueError("trace has no layers")
        for pos, layer in enumerate(self.layers):
            if layer.index != pos:
                raise ValueError("layer indices must be contiguous from 0")
            if layer.dim < 1:
                raise ValueError(f"layer {pos} has non-positive dim {layer.dim}")
        for name, split in self.splits.items():
            if len(split.activations) != len(self.layers):
                raise ValueError(f"split {name!r} has wrong layer count")
            n = split.num_examples
            for layer, acts in zip(self.layers, split.activations):
                if acts.shape != (n, layer.dim):
                    raise ValueError(
                        f"split {name!r} layer {layer.index}: shape {acts.shape}, "
                        f"expected {(n, layer.dim)}"
                    )
            labels = split.model_labels
            if labels.shape != (n,):
                raise ValueError(f"split {name!r} model_labels shape {labels.shape}")
            if n and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"split {name!r} model_labels out of range")
            if split.true_labels is not None:
                if split.true_labels.shape != (n,):
                    raise ValueError(f"split {name!r} true_labels shape mismatch")
                if n and (
                    split.true_labels.min() < 0
                    or split.true_labels.max() >= self.num_classes
                ):
                    raise ValueError(f"split {name!r} true_labels out of range")


@dataclass
class RawDataset:
    """Input feature matrices and generator labels, one entry per split."""

    name: str
    num_classes: int
    input_dim: int
    splits: dict[str, tuple[np.ndarray, np.ndarray]]


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    counts: Mapping[str, int],
    separation: float,
    seed: int,
) -> RawDataset:
    """Gaussian blobs: class means on a sphere of radius ``separation``
    with unit-variance noise.

    Splits are drawn in the mapping's iteration order, so a fixed seed and
    a fixed ordering give bit-identical data.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if input_dim < 1:
        raise ValueError(f"input_dim must be >= 1, got {input_dim}")
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if not counts:
        raise ValueError("counts is empty")
    for split_name, count in counts.items():
        if count < 1:
            raise ValueError(f"split {split_name!r} count must be >= 1, got {count}")

    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, input_dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    means = separation * directions / norms

    splits: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for split_name, count in counts.items():
        labels = rng.integers(0, num_classes, size=count)
        x = means[labels] + rng.standard_normal((count, input_dim))
        splits[split_name] = (x.astype(np.float32), labels.astype(np.int64))
    return RawDataset("synthetic", num_classes, input_dim, splits)


@dataclass
class RefModel:
    """Feedforward ReLU classifier whose hidden post-activations are what
    a trace records."""

    params: net.Params
    activation: str = "relu"
    seed: int | None = None
    train_accuracy: float | None = None

    @property
    def input_dim(self) -> int:
        return self.params[0][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.params[-1][0].shape[1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w, _ in self.params[:-1])

    def forward_example(self, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Hidden activations and logits for one example vector."""
        return net.forward(self.params, np.asarray(x, dtype=np.float64))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return net.predict(self.params, x)


def train_reference_model(
    dataset: RawDataset,
    hidden_widths,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    split: str = "train",
) -> RefModel:
    """Trains the reference classifier with mini-batch SGD on one split.

    Zero epochs returns the seeded initial weights unchanged. The returned
    model carries its final train accuracy.
    """
    hidden_widths = tuple(int(w) for w in hidden_widths)
    if len(hidden_widths) < 1:
        raise ValueError("need at least one hidden layer before the output")
    if split not in dataset.splits:
        raise ValueError(f"dataset has no split {split!r}")
    x, y = dataset.splits[split]
    dims = [dataset.input_dim, *hidden_widths, dataset.num_classes]
    params = net.init_params(dims, seed)
    params = net.train_sgd(
        params, x, y, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed
    )
    acc = net.accuracy(params, x, y)
    return RefModel(params, seed=seed, train_accuracy=acc)


def forward_collect(model: RefModel, dataset: RawDataset) -> ActivationTrace:
    """Runs every split through the model and records per-layer hidden
    activations (as float32) plus the model's own predicted labels.

    The forward pass runs one example at a time so replayed traces match a
    layer-by-layer live pass bit for bit.
    """
    if dataset.input_dim != model.input_dim:
        raise ValueError(
            f"dataset dim {dataset.input_dim} != model input dim {model.input_dim}"
        )
    widths = model.hidden_widths
    layers = [LayerMeta(i, f"hidden{i}", w) for i, w in enumerate(widths)]
    splits: dict[str, SplitData] = {}
    for split_name, (x, y_true) in dataset.splits.items():
        n = x.shape[0]
        per_layer = [np.empty((n, w), dtype=np.float32) for w in widths]
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            hidden, logits = model.forward_example(x[i])
            for li, h in enumerate(hidden):
                per_layer[li][i] = h
            labels[i] = int(np.argmax(logits))
        splits[split_name] = SplitData(per_layer, labels, y_true.copy())
    return ActivationTrace(dataset.name, dataset.num_classes, layers, splits)


def _write_activation_blob(path: Path, mat: np.ndarray) -> None:
    rows, dim = mat.shape
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(_TRACE_HEADER.pack(FORMAT_VERSION, rows, dim))
        fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def _read_activation_blob(path: Path) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    header_len = 4 + _TRACE_HEADER.size
    if len(data) < header_len:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != TRACE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, rows, dim = _TRACE_HEADER.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = header_len + rows * dim * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=header_len)
    return flat.reshape(rows, dim).astype(np.float32)


def _write_label_blob(path: Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
        raise ValueError(f"labels do not fit in u32: {path.name}")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(_LABEL_HEADER.pack(FORMAT_VERSION, labels.shape[0]))
        fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def _read_label_blob(path: Path) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    header_len = 4 + _LABEL_HEADER.size
    if len(data) < header_len:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, count = _LABEL_HEADER.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = header_len + count * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<u4", offset=header_len).astype(np.int64)


def write_trace(trace: ActivationTrace, directory: Path | str) -> Path:
    """Writes the trace directory; returns the manifest path.

    The manifest goes last so a partially written directory is detectable.
    """
    trace.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split_name, split in trace.splits.items():
        for layer in trace.layers:
            _write_activation_blob(
                directory / f"{split_name}_layer{layer.index}.act",
                split.activations[layer.index],
            )
        _write_label_blob(
            directory / f"{split_name}_model_labels.lbl", split.model_labels
        )
        if split.true_labels is not None:
            _write_label_blob(
                directory / f"{split_name}_true_labels.lbl", split.true_labels
            )
    manifest = {
        "dataset_name": trace.dataset_name,
        "num_classes": trace.num_classes,
        "flatten_order": trace.flatten_order,
        "layers": [
            {"index": l.index, "name": l.name, "dim": l.dim} for l in trace.layers
        ],
        "splits": [
            {"name": name, "count": split.num_examples}
            for name, split in trace.splits.items()
        ],
    }
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def read_trace(directory: Path | str) -> ActivationTrace:
    """Reads a trace directory back, checking manifest/blob consistency."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"{manifest_path}: missing manifest")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc
    for key in ("dataset_name", "num_classes", "layers", "splits"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing key {key!r}")

    try:
        layers = [
            LayerMeta(int(l["index"]), str(l["name"]), int(l["dim"]))
            for l in manifest["layers"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: malformed layer entry: {exc}") from exc

    splits: dict[str, SplitData] = {}
    for entry in manifest["splits"]:
        try:
            split_name, count = str(entry["name"]), int(entry["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{manifest_path}: malformed split entry: {exc}") from exc
        activations = []
        for layer in layers:
            blob_path = directory / f"{split_name}_layer{layer.index}.act"
            mat = _read_activation_blob(blob_path)
            if mat.shape != (count, layer.dim):
                raise FormatError(
                    f"{blob_path}: shape {mat.shape} disagrees with manifest "
                    f"{(count, layer.dim)}"
                )
            activations.append(mat)
        labels_path = directory / f"{split_name}_model_labels.lbl"
        model_labels = _read_label_blob(labels_path)
        if model_labels.shape[0] != count:
            raise FormatError(f"{labels_path}: count disagrees with manifest")
        true_path = directory / f"{split_name}_true_labels.lbl"
        true_labels = None
        if true_path.is_file():
            true_labels = _read_label_blob(true_path)
            if true_labels.shape[0] != count:
                raise FormatError(f"{true_path}: count disagrees with manifest")
        splits[split_name] = SplitData(activations, model_labels, true_labels)

    trace = ActivationTrace(
        dataset_name=str(manifest["dataset_name"]),
        num_classes=int(manifest["num_classes"]),
        layers=layers,
        splits=splits,
        flatten_order=str(manifest.get("flatten_order", "chw")),
    )
    try:
        trace.validate()
    except ValueError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc
    return trace


def save_ref_model(model: RefModel, path: Path | str) -> Path:
    """Own binary format (f64 blocks) so rewrites are byte-identical."""
    path = Path(path)
    dims = [model.input_dim, *model.hidden_widths, model.num_classes]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}Q", *dims))
        for w, b in model.params:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return path


def load_ref_model(path: Path | str) -> RefModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(data) < 16 or data[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, ndims = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 16
    dims = struct.unpack_from(f"<{ndims}Q", data, offset)
    offset += 8 * ndims
    params: net.Params = []
    for din, dout in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f8", count=din * dout, offset=offset)
        offset += 8 * din * dout
        b = np.frombuffer(data, dtype="<f8", count=dout, offset=offset)
        offset += 8 * dout
        params.append((w.reshape(din, dout).astype(np.float64), b.astype(np.float64)))
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return RefModel(params)
