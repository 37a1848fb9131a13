import pytest
import torch

from stylesplat.appearance import AppearanceConfig
from stylesplat.backbone import BackboneConfig
from stylesplat.model import ModelConfig, StylizationNet
from stylesplat.structure import StructureConfig


def tiny_config(seed=0, size=16, patch=4):
    return ModelConfig(
        backbone=BackboneConfig(patch_size=patch, width=32, depth=2, heads=2, image_size=(size, size)),
        structure=StructureConfig(width=32, depth=2, heads=2, taps=(1, 2), head_features=8),
        appearance=AppearanceConfig(depth=2, heads=2, head_features=8),
        seed=seed,
    )


@pytest.fixture
def tiny_net():
    torch.manual_seed(0)
    return StylizationNet(tiny_config()).eval()


def images(b, n, size=16, seed=0, dtype=torch.float32):
    return torch.rand(b, n, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
