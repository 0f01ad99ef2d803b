"""Per-layer freeze thresholds.

Calibration replays a held-out split through every layer's cache and sets
each layer's threshold to the highest lookup confidence that predicted the
model's label wrongly there. The engine freezes only on confidence
strictly above the threshold, so by construction no validation example
would have been frozen with a wrong label.

Stored as ``thresholds.json``: a ``scale`` (the cumulative multiplier
applied so far) and one ``{index, threshold, enabled}`` entry per layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .cache import LayerCache, lookup
from .errors import ConfigurationError, FormatError
from .reduce import Reducer, embed_one
from .trace import ActivationTrace


@dataclass
class ThresholdTable:
    thresholds: np.ndarray
    enabled: np.ndarray
    scale: float = 1.0

    @property
    def num_layers(self) -> int:
        return int(self.thresholds.shape[0])

    def __post_init__(self) -> None:
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.enabled = np.asarray(self.enabled, dtype=bool)
        if self.thresholds.ndim != 1 or self.enabled.shape != self.thresholds.shape:
            raise ValueError("thresholds and enabled flags must align")
        if np.any(np.isnan(self.thresholds)) or np.any(self.thresholds < 0.0):
            raise ValueError("thresholds must be non-negative")

    @classmethod
    def zeros(cls, num_layers: int) -> "ThresholdTable":
        return cls(np.zeros(num_layers), np.ones(num_layers, dtype=bool))

    @classmethod
    def never_freeze(cls, num_layers: int) -> "ThresholdTable":
        return cls(np.full(num_layers, np.inf), np.ones(num_layers, dtype=bool))


def max_wrong_confidence(observations: Iterable[tuple[int, int, float]]) -> float:
    """The calibration rule for one layer: the highest confidence among
    wrong predictions, 0.0 when nothing was wrong.

    Observations are (predicted_label, reference_label, confidence)
    triples; the result does not depend on their order.
    """
    worst = 0.0
    for predicted, reference, confidence in observations:
        if predicted != reference and confidence > worst:
            worst = float(confidence)
    return worst


def compute_thresholds(
    caches: list[LayerCache],
    reducers: Mapping[int, Reducer | None],
    trace: ActivationTrace,
    split: str = "val",
) -> ThresholdTable:
    """Calibrates every layer on the given split; all layers come back
    enabled with scale 1.0."""
    if not caches:
        raise ValueError("no caches given")
    if split not in trace.splits:
        raise ValueError(f"trace has no split {split!r}")
    data = trace.splits[split]
    if data.num_examples == 0:
        raise ValueError(f"split {split!r} is empty; cannot calibrate on it")
    thresholds = np.zeros(len(caches))
    for pos, cache in enumerate(caches):
        if cache.layer_index not in reducers:
            raise ConfigurationError(
                f"no reducer for layer {cache.layer_index}; train one or disable reduction"
            )
        reducer = reducers[cache.layer_index]
        acts = data.activations[cache.layer_index]
        observations = []
        for i in range(data.num_examples):
            result = lookup(cache, embed_one(reducer, acts[i]))
            observations.append(
                (result.label, int(data.model_labels[i]), result.confidence)
            )
        thresholds[pos] = max_wrong_confidence(observations)
    return ThresholdTable(thresholds, np.ones(len(caches), dtype=bool))


def scale_thresholds(table: ThresholdTable, lam: float) -> ThresholdTable:
    """Multiplies every enabled layer's threshold by lam (the sweep
    mechanism); returns a new table with the cumulative scale recorded."""
    if lam < 0:
        raise ValueError(f"scale must be >= 0, got {lam}")
    thresholds = table.thresholds.copy()
    thresholds[table.enabled] *= lam
    return ThresholdTable(thresholds, table.enabled.copy(), table.scale * lam)


def set_enabled_layers(table: ThresholdTable, enabled_layers) -> ThresholdTable:
    """Returns a table where only the listed layer indices may freeze."""
    enabled = np.zeros(table.num_layers, dtype=bool)
    for index in enabled_layers:
        if not 0 <= index < table.num_layers:
            raise ValueError(f"layer index {index} out of range")
        enabled[index] = True
    return ThresholdTable(table.thresholds.copy(), enabled, table.scale)


def save_thresholds(table: ThresholdTable, path: Path | str) -> Path:
    path = Path(path)
    doc = {
        "scale": table.scale,
        "layers": [
            {
                "index": i,
                "threshold": float(table.thresholds[i]),
                "enabled": bool(table.enabled[i]),
            }
            for i in range(table.num_layers)
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_thresholds(path: Path | str) -> ThresholdTable:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    try:
        layers = sorted(doc["layers"], key=lambda e: int(e["index"]))
        indices = [int(e["index"]) for e in layers]
        if indices != list(range(len(indices))):
            raise ValueError("layer indices must be contiguous from 0")
        thresholds = np.array([float(e["threshold"]) for e in layers])
        enabled = np.array([bool(e["enabled"]) for e in layers], dtype=bool)
        return ThresholdTable(thresholds, enabled, float(doc.get("scale", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
