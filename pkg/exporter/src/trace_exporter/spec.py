from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ExportError
from .models import PRESETS

DATASETS = ("cifar10", "synthetic")


@dataclass
class ExportSpec:
    """Everything one export run needs.

    split_sizes partitions the dataset's train pool; with
    test_from_holdout the dataset's held-out test images replace the
    carved-out test split and the third size is ignored.
    """

    model: str = "resnet18-cifar"
    dataset: str = "cifar10"
    out_dir: str = "traces/export"
    data_root: str | None = None
    weights: str | None = None
    split_sizes: tuple[int, int, int] = (40_000, 5_000, 5_000)
    test_from_holdout: bool = False
    batch_size: int = 256
    seed: int = 0
    device: str = "cpu"
    normalize: bool = True
    synthetic_classes: int = field(default=10, repr=False)

    def validate(self) -> None:
        if self.model not in PRESETS:
            raise ExportError(
                f"unknown model preset {self.model!r}; choose from {sorted(PRESETS)}"
            )
        if self.dataset not in DATASETS:
            raise ExportError(
                f"unknown dataset {self.dataset!r}; choose from {sorted(DATASETS)}"
            )
        if self.dataset == "cifar10" and not self.data_root:
            raise ExportError("cifar10 needs data_root pointing at the dataset files")
        if len(self.split_sizes) != 3 or any(s < 1 for s in self.split_sizes):
            raise ExportError(f"split_sizes must be three positives, got {self.split_sizes}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.synthetic_classes < 2:
            raise ExportError("synthetic_classes must be >= 2")
