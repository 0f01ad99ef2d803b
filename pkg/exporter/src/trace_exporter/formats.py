"""Writers for the trace directory layout the cache pipeline consumes.

Deliberately self-contained: the byte layout is the contract between the
two packages, so this module re-states it rather than importing the other
side. Activation blobs are magic ``FZTR``, u32 version, u64 rows, u64 dim,
then row-major little-endian float32. Label blobs are ``FZLB``, u32
version, u64 count, then u32 labels. Every file is written to a ``.tmp``
sibling and renamed into place only when complete.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ExportError

TRACE_MAGIC = b"FZTR"
LABEL_MAGIC = b"FZLB"
FORMAT_VERSION = 1

_TRACE_HEADER = struct.Struct("<IQQ")
_LABEL_HEADER = struct.Struct("<IQ")


class ActivationWriter:
    """Streams one split/layer blob; row count is fixed up front so the
    header can be written first and the file appended batch by batch."""

    def __init__(self, path: Path, rows: int, dim: int):
        self.path = Path(path)
        self.rows = int(rows)
        self.dim = int(dim)
        self.written = 0
        self.tmp = self.path.with_name(self.path.name + ".tmp")
        self._fh = open(self.tmp, "wb")
        self._fh.write(TRACE_MAGIC)
        self._fh.write(_TRACE_HEADER.pack(FORMAT_VERSION, self.rows, self.dim))

    def append(self, batch: np.ndarray) -> None:
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ExportError(
                f"{self.path.name}: batch shape {batch.shape}, expected (*, {self.dim})"
            )
        self._fh.write(np.ascontiguousarray(batch, dtype="<f4").tobytes())
        self.written += batch.shape[0]

    def close(self) -> None:
        self._fh.close()
        if self.written != self.rows:
            self.tmp.unlink(missing_ok=True)
            raise ExportError(
                f"{self.path.name}: wrote {self.written} rows, promised {self.rows}"
            )
        self.tmp.replace(self.path)

    def abort(self) -> None:
        self._fh.close()
        self.tmp.unlink(missing_ok=True)


def write_labels(path: Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
        raise ExportError(f"{path.name}: labels do not fit in u32")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(_LABEL_HEADER.pack(FORMAT_VERSION, labels.shape[0]))
        fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())
    tmp.replace(path)


def read_labels(path: Path) -> np.ndarray:
    """Used by the post-export verification pass and the tests."""
    data = Path(path).read_bytes()
    header_len = 4 + _LABEL_HEADER.size
    if len(data) < header_len or data[:4] != LABEL_MAGIC:
        raise ExportError(f"{path}: not a label file")
    version, count = _LABEL_HEADER.unpack_from(data, 4)
    if version != FORMAT_VERSION or len(data) != header_len + 4 * count:
        raise ExportError(f"{path}: malformed label file")
    return np.frombuffer(data, dtype="<u4", offset=header_len).astype(np.int64)


def read_activations(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header_len = 4 + _TRACE_HEADER.size
    if len(data) < header_len or data[:4] != TRACE_MAGIC:
        raise ExportError(f"{path}: not an activation file")
    version, rows, dim = _TRACE_HEADER.unpack_from(data, 4)
    if version != FORMAT_VERSION or len(data) != header_len + 4 * rows * dim:
        raise ExportError(f"{path}: malformed activation file")
    return np.frombuffer(data, dtype="<f4", offset=header_len).reshape(rows, dim)


def write_manifest(
    directory: Path,
    dataset_name: str,
    num_classes: int,
    layer_names: list[str],
    layer_dims: list[int],
    split_counts: dict[str, int],
    extra: dict | None = None,
) -> Path:
    manifest = {
        "dataset_name": dataset_name,
        "num_classes": num_classes,
        "flatten_order": "chw",
        "layers": [
            {"index": i, "name": name, "dim": dim}
            for i, (name, dim) in enumerate(zip(layer_names, layer_dims))
        ],
        "splits": [
            {"name": name, "count": count} for name, count in split_counts.items()
        ],
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    tmp.replace(path)
    return path
