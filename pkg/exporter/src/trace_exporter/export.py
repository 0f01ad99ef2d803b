"""Forward-hook export: run a preset network over a dataset and stream
per-block activations plus the model's own predictions into a trace
directory.

Model, weights, hooks and dataset are all resolved before the output
directory is touched, so a misconfigured run fails without leaving
files behind. Activations land via temp-file-then-rename writers, the
manifest goes last, and each split's label file is read back and
compared against the in-memory predictions before the run is declared
good.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Subset

from . import formats
from .errors import ExportError
from .models import build_model
from .spec import ExportSpec

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class SyntheticImages(Dataset):
    """Seeded random 3x32x32 tensors with random labels; stands in for a
    real dataset in format and shape work."""

    def __init__(self, count: int, num_classes: int, seed: int):
        gen = torch.Generator().manual_seed(seed)
        self.images = torch.randn(count, 3, 32, 32, generator=gen)
        self.labels = torch.randint(0, num_classes, (count,), generator=gen)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int):
        return self.images[idx], int(self.labels[idx])


def _cifar(root: str, train: bool, normalize: bool):
    from torchvision import datasets, transforms

    steps = [transforms.ToTensor()]
    if normalize:
        steps.append(transforms.Normalize(CIFAR_MEAN, CIFAR_STD))
    try:
        return datasets.CIFAR10(
            root=root, train=train, download=False,
            transform=transforms.Compose(steps),
        )
    except RuntimeError as exc:
        raise ExportError(f"cifar10 at {root!r}: {exc}") from exc


def resolve_splits(spec: ExportSpec) -> tuple[str, int, dict[str, Dataset]]:
    """(dataset name, num_classes, split -> torch dataset)."""
    n_train, n_val, n_test = spec.split_sizes
    if spec.dataset == "synthetic":
        # independent seeds per split, offset so splits never alias
        splits = {
            "train": SyntheticImages(n_train, spec.synthetic_classes, spec.seed),
            "val": SyntheticImages(n_val, spec.synthetic_classes, spec.seed + 1),
            "test": SyntheticImages(n_test, spec.synthetic_classes, spec.seed + 2),
        }
        return "synthetic", spec.synthetic_classes, splits

    pool = _cifar(spec.data_root, train=True, normalize=spec.normalize)
    carve = n_train + n_val + (0 if spec.test_from_holdout else n_test)
    if carve > len(pool):
        raise ExportError(
            f"split_sizes need {carve} examples, train pool has {len(pool)}"
        )
    order = np.random.default_rng(spec.seed).permutation(len(pool))
    splits: dict[str, Dataset] = {
        "train": Subset(pool, order[:n_train].tolist()),
        "val": Subset(pool, order[n_train : n_train + n_val].tolist()),
    }
    if spec.test_from_holdout:
        splits["test"] = _cifar(spec.data_root, train=False, normalize=spec.normalize)
    else:
        splits["test"] = Subset(
            pool, order[n_train + n_val : n_train + n_val + n_test].tolist()
        )
    return "cifar10", 10, splits


def _export_split(
    out_dir: Path,
    split_name: str,
    dataset: Dataset,
    model: torch.nn.Module,
    blocks: list[torch.nn.Module],
    num_classes: int,
    batch_size: int,
    device: str,
) -> tuple[list[int], int]:
    """Streams one split; returns (per-block dims, example count)."""
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=0)
    captured: dict[int, torch.Tensor] = {}

    def make_hook(idx):
        def hook(module, args, output):
            captured[idx] = output

        return hook

    handles = [b.register_forward_hook(make_hook(i)) for i, b in enumerate(blocks)]
    writers: list[formats.ActivationWriter] = []
    dims: list[int] = []
    model_labels: list[np.ndarray] = []
    true_labels: list[np.ndarray] = []
    rows = len(dataset)
    try:
        with torch.no_grad():
            for x, y in loader:
                captured.clear()
                logits = model(x.to(device))
                preds = logits.argmax(dim=1)
                if int(preds.max()) >= num_classes:
                    raise ExportError(
                        f"{split_name}: model emits labels >= {num_classes}"
                    )
                if len(captured) != len(blocks):
                    raise ExportError(
                        f"{split_name}: {len(captured)} hooks fired, "
                        f"expected {len(blocks)}"
                    )
                if not writers:
                    for i in range(len(blocks)):
                        dim = int(captured[i][0].numel())
                        dims.append(dim)
                        writers.append(
                            formats.ActivationWriter(
                                out_dir / f"{split_name}_layer{i}.act", rows, dim
                            )
                        )
                for i, writer in enumerate(writers):
                    flat = captured[i].reshape(captured[i].shape[0], -1)
                    writer.append(flat.cpu().numpy())
                model_labels.append(preds.cpu().numpy())
                true_labels.append(np.asarray(y))
        for writer in writers:
            writer.close()
        writers = []
    finally:
        for handle in handles:
            handle.remove()
        for writer in writers:
            writer.abort()

    preds_all = (
        np.concatenate(model_labels) if model_labels else np.zeros(0, dtype=np.int64)
    )
    truth_all = (
        np.concatenate(true_labels) if true_labels else np.zeros(0, dtype=np.int64)
    )
    labels_path = out_dir / f"{split_name}_model_labels.lbl"
    formats.write_labels(labels_path, preds_all)
    formats.write_labels(out_dir / f"{split_name}_true_labels.lbl", truth_all)
    # every written label must round-trip to the argmax we computed
    if not np.array_equal(formats.read_labels(labels_path), preds_all):
        raise ExportError(f"{labels_path}: readback disagrees with predictions")
    return dims, rows


def export_traces(spec: ExportSpec) -> Path:
    """Runs the full export; returns the trace directory."""
    spec.validate()
    dataset_name, num_classes, splits = resolve_splits(spec)
    model, block_names, blocks = build_model(
        spec.model, num_classes, weights=spec.weights, seed=spec.seed
    )
    model.to(spec.device)

    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_counts: dict[str, int] = {}
    dims: list[int] | None = None
    for split_name, dataset in splits.items():
        split_dims, count = _export_split(
            out_dir, split_name, dataset, model, blocks,
            num_classes, spec.batch_size, spec.device,
        )
        if dims is None:
            dims = split_dims
        elif split_dims != dims:
            raise ExportError(
                f"{split_name}: block dims {split_dims} differ from {dims}"
            )
        split_counts[split_name] = count
    assert dims is not None
    formats.write_manifest(
        out_dir,
        dataset_name,
        num_classes,
        block_names,
        dims,
        split_counts,
        extra={
            "model": spec.model,
            "weights": Path(spec.weights).name if spec.weights else None,
            "export_seed": spec.seed,
        },
    )
    return out_dir
