"""Residual network presets and the block list the hooks attach to.

The ``-cifar`` presets swap the 7x7/stride-2 stem and the max-pool for a
3x3/stride-1 convolution, the usual adaptation for 32x32 inputs; with it
an 18-layer network's 8 blocks emit dims 65536/65536/32768/32768/16384/
16384/8192/8192. The plain presets keep the stock stem. The 50-layer
network exposes all 16 bottleneck blocks (3+4+6+3).
"""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn
from torchvision.models import resnet18, resnet50

from .errors import ExportError

PRESETS = {
    "resnet18-cifar": (resnet18, True, 8),
    "resnet50-cifar": (resnet50, True, 16),
    "resnet18": (resnet18, False, 8),
    "resnet50": (resnet50, False, 16),
}


def block_modules(model: nn.Module) -> tuple[list[str], list[nn.Module]]:
    """Residual blocks in forward order. Hooking a block module captures
    its output after the final in-block activation, residual add included."""
    names, modules = [], []
    for stage_name in ("layer1", "layer2", "layer3", "layer4"):
        stage = getattr(model, stage_name, None)
        if stage is None:
            raise ExportError(f"model has no stage {stage_name!r}; hooks unresolvable")
        for j, block in enumerate(stage):
            names.append(f"{stage_name}.{j}")
            modules.append(block)
    return names, modules


def _load_state_dict(model: nn.Module, weights: str | Path) -> None:
    path = Path(weights)
    if not path.is_file():
        raise ExportError(f"weights file not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ExportError(f"{path}: cannot load checkpoint: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    state = {k.removeprefix("module."): v for k, v in state.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ExportError(f"{path}: state dict does not match preset: {exc}") from exc


def build_model(
    preset: str,
    num_classes: int,
    weights: str | Path | None = None,
    seed: int = 0,
) -> tuple[nn.Module, list[str], list[nn.Module]]:
    """Returns (eval-mode model, block names, block modules).

    Without a weights file the network keeps its seeded random
    initialization, which is enough for format and shape work.
    """
    if preset not in PRESETS:
        raise ExportError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
    ctor, cifar_stem, expected_blocks = PRESETS[preset]
    torch.manual_seed(seed)
    model = ctor(weights=None, num_classes=num_classes)
    if cifar_stem:
        model.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
        model.maxpool = nn.Identity()
    if weights is not None:
        _load_state_dict(model, weights)
    names, modules = block_modules(model)
    if len(modules) != expected_blocks:
        raise ExportError(
            f"{preset}: found {len(modules)} blocks, expected {expected_blocks}"
        )
    model.eval()
    return model, names, modules
