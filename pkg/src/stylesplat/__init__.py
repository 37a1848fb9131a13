"""Feed-forward stylized 3D Gaussian prediction from a few posed views."""

from .estimator import FeedForwardStylizer
from .gaussians import GaussianSet, read_sgs, write_sgs
from .model import ModelConfig, StylizationNet
from .renderer import render, render_brute_force

__version__ = "0.1.0"

__all__ = [
    "FeedForwardStylizer",
    "GaussianSet",
    "ModelConfig",
    "StylizationNet",
    "read_sgs",
    "render",
    "render_brute_force",
    "write_sgs",
]
