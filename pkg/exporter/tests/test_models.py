import torch
import pytest

from trace_exporter.errors import ExportError
from trace_exporter.models import block_modules, build_model


def test_18_layer_preset_has_8_named_blocks():
    model, names, blocks = build_model("resnet18-cifar", num_classes=10, seed=0)
    assert len(blocks) == 8
    assert names == [
        "layer1.0", "layer1.1", "layer2.0", "layer2.1",
        "layer3.0", "layer3.1", "layer4.0", "layer4.1",
    ]
    assert not model.training


def test_cifar_stem_swapped_in():
    model, _, _ = build_model("resnet18-cifar", num_classes=10, seed=0)
    assert model.conv1.kernel_size == (3, 3)
    assert model.conv1.stride == (1, 1)
    assert isinstance(model.maxpool, torch.nn.Identity)
    stock, _, _ = build_model("resnet18", num_classes=10, seed=0)
    assert stock.conv1.kernel_size == (7, 7)


def test_50_layer_preset_has_16_blocks():
    _, names, blocks = build_model("resnet50-cifar", num_classes=10, seed=0)
    assert len(blocks) == 16
    assert names[0] == "layer1.0" and names[-1] == "layer4.2"


def test_head_matches_class_count():
    model, _, _ = build_model("resnet18-cifar", num_classes=7, seed=0)
    assert model.fc.out_features == 7


def test_unknown_preset_rejected():
    with pytest.raises(ExportError, match="unknown model preset"):
        build_model("vgg16", num_classes=10)


def test_missing_weights_file_rejected(tmp_path):
    with pytest.raises(ExportError, match="not found"):
        build_model("resnet18-cifar", 10, weights=tmp_path / "absent.pt")


def test_mismatched_state_dict_rejected(tmp_path):
    path = tmp_path / "wrong.pt"
    torch.save({"not_a_layer": torch.zeros(3)}, path)
    with pytest.raises(ExportError, match="does not match"):
        build_model("resnet18-cifar", 10, weights=path)


def test_block_modules_requires_stages():
    with pytest.raises(ExportError, match="hooks unresolvable"):
        block_modules(torch.nn.Linear(4, 2))


def test_same_seed_same_weights():
    a, _, _ = build_model("resnet18-cifar", num_classes=10, seed=5)
    b, _, _ = build_model("resnet18-cifar", num_classes=10, seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
