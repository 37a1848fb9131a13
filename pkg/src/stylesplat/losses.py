"""Perceptual feature pyramid and the training losses.

The default :class:`PerceptualBackbone` is a fixed random-weight conv pyramid
whose four stages stand in for relu1_1 .. relu4_1 of a pretrained network.
Any module returning the same four named stages can be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

STAGES = ("stage1", "stage2", "stage3", "stage4")
STYLE_WEIGHT = 10.0
MSE_WEIGHT = 1.0
PERCEPTUAL_WEIGHT = 0.05
STD_EPS = 1e-5
NORM_EPS = 1e-10


class PerceptualBackbone(nn.Module):
    """Frozen 4-stage conv pyramid with strides 1, 2, 4, 8."""

    def __init__(self, channels: tuple = (16, 32, 64, 128), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(cout, generator=gen) * 0.01)
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, images: torch.Tensor) -> dict:
        """images (B, 3, H, W) in [0, 1] -> dict of stage feature maps."""
        x = (images - 0.5) / 0.25
        feats = {}
        for i, (name, conv) in enumerate(zip(STAGES, self.convs)):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats[name] = x
        return feats


_default_backbones: dict = {}


def default_backbone(dtype=torch.float32) -> PerceptualBackbone:
    if dtype not in _default_backbones:
        _default_backbones[dtype] = PerceptualBackbone().to(dtype)
    return _default_backbones[dtype]


def to_chw(images: torch.Tensor) -> torch.Tensor:
    """Accept (..., H, W, 3) or (..., 3, H, W) image batches; return (B, 3, H, W)."""
    if images.shape[-1] == 3 and images.shape[-3] != 3:
        images = images.movedim(-1, -3)
    return images.reshape(-1, *images.shape[-3:])


def feature_stats(feature_map: torch.Tensor):
    """Per-channel spatial mean and population variance of (..., C, H, W)."""
    if feature_map.shape[-1] * feature_map.shape[-2] == 0:
        raise ValueError("feature map has no spatial extent")
    flat = feature_map.flatten(-2)
    mean = flat.mean(-1)
    var = ((flat - mean[..., None]) ** 2).mean(-1)
    return mean, var


def _std(var: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(var + STD_EPS)


def style_loss_from_features(render_feats: dict, style_feats: dict) -> torch.Tensor:
    total = 0.0
    for name in STAGES:
        mr, vr = feature_stats(render_feats[name])
        ms, vs = feature_stats(style_feats[name])
        term = ((mr - ms) ** 2).sum(-1) + ((_std(vr) - _std(vs)) ** 2).sum(-1)
        total = total + term / mr.shape[-1]
    return total.mean()


def style_loss(rendered: torch.Tensor, style: torch.Tensor, backbone: Optional[nn.Module] = None) -> torch.Tensor:
    """Mean/std feature-statistics mismatch over all four stages.

    ``rendered``: a batch of views; ``style``: one image or one per view.
    """
    backbone = backbone or default_backbone(rendered.dtype)
    r = to_chw(rendered)
    s = to_chw(style)
    if r.shape[-2:] != s.shape[-2:]:
        raise ValueError("rendered and style images differ in size")
    rf = backbone(r)
    sf = backbone(s)
    if s.shape[0] == 1 and r.shape[0] > 1:
        sf = {k: v.expand(r.shape[0], *v.shape[1:]) for k, v in sf.items()}
    return style_loss_from_features(rf, sf)


def _paired(rendered, target):
    r, t = to_chw(rendered), to_chw(target)
    if r.shape != t.shape:
        raise ValueError(f"rendered/target count or size mismatch: {tuple(r.shape)} vs {tuple(t.shape)}")
    return r, t


def content_loss(rendered: torch.Tensor, target: torch.Tensor, backbone: Optional[nn.Module] = None) -> torch.Tensor:
    """MSE of stage3 features plus MSE of stage4 features, averaged over pairs."""
    backbone = backbone or default_backbone(rendered.dtype)
    r, t = _paired(rendered, target)
    rf, tf = backbone(r), backbone(t)
    return sum(((rf[k] - tf[k]) ** 2).mean() for k in ("stage3", "stage4"))


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / torch.sqrt((x * x).sum(dim=1, keepdim=True) + NORM_EPS)


def perceptual_distance_from_features(a: dict, b: dict) -> torch.Tensor:
    """Channel-normalized squared feature difference, mean over positions and stages.

    Returns one value per image in the batch.
    """
    per_stage = [((_unit(a[k]) - _unit(b[k])) ** 2).sum(1).flatten(1).mean(1) for k in STAGES]
    return torch.stack(per_stage).mean(0)


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, backbone: Optional[nn.Module] = None) -> torch.Tensor:
    backbone = backbone or default_backbone(x.dtype)
    r, t = _paired(x, y)
    return perceptual_distance_from_features(backbone(r), backbone(t))


def photometric_loss(rendered, target, backbone=None, mse_weight: float = MSE_WEIGHT,
                     perceptual_weight: float = PERCEPTUAL_WEIGHT) -> torch.Tensor:
    r, t = _paired(rendered, target)
    mse = ((r - t) ** 2).mean()
    return mse_weight * mse + perceptual_weight * perceptual_distance(r, t, backbone).mean()


@dataclass
class LossReport:
    photometric: torch.Tensor
    style: torch.Tensor
    content: torch.Tensor
    identity: torch.Tensor
    total: torch.Tensor
    style_weight: float = STYLE_WEIGHT
    mse_weight: float = MSE_WEIGHT
    perceptual_weight: float = PERCEPTUAL_WEIGHT

    def values(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("photometric", "style", "content", "identity", "total")}


def total_loss(
    phase: str,
    renders_stylized: Optional[torch.Tensor] = None,
    renders_identity: Optional[torch.Tensor] = None,
    targets: Optional[torch.Tensor] = None,
    style_image: Optional[torch.Tensor] = None,
    backbone: Optional[nn.Module] = None,
    style_weight: float = STYLE_WEIGHT,
    mse_weight: float = MSE_WEIGHT,
    perceptual_weight: float = PERCEPTUAL_WEIGHT,
    use_identity: bool = True,
) -> LossReport:
    """Phase ``nvs``: photometric on content-as-style renders.
    Phase ``stylize``: style_weight * style + content (+ identity photometric)."""
    if targets is None:
        raise ValueError("targets are required")
    ref = targets
    zero = ref.new_zeros(())
    weights = dict(style_weight=style_weight, mse_weight=mse_weight, perceptual_weight=perceptual_weight)
    if phase == "nvs":
        if renders_identity is None:
            raise ValueError("phase 'nvs' needs content-as-style renders")
        photo = photometric_loss(renders_identity, targets, backbone, mse_weight, perceptual_weight)
        return LossReport(photo, zero, zero, zero, photo, **weights)
    if phase == "stylize":
        if renders_stylized is None or style_image is None:
            raise ValueError("phase 'stylize' needs stylized renders and a style image")
        if use_identity and renders_identity is None:
            raise ValueError("identity loss needs content-as-style renders")
        sty = style_loss(renders_stylized, style_image, backbone)
        con = content_loss(renders_stylized, targets, backbone)
        ident = (photometric_loss(renders_identity, targets, backbone, mse_weight, perceptual_weight)
                 if use_identity else zero)
        total = style_weight * sty + con + ident
        return LossReport(ident, sty, con, ident, total, **weights)
    raise ValueError(f"unknown phase {phase!r}")
