"""Dense prediction head fusing transformer taps into per-pixel outputs."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ResidualConv(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class DenseHead(nn.Module):
    """Simplified DPT head.

    Four token taps are linearly projected and reshaped to the patch grid.
    The deepest tap is refined at grid resolution, then repeatedly upsampled
    2x and fused with the next shallower tap resized to the same resolution,
    ending at full image resolution where a shallow image feature joins before
    the output convolutions.
    """

    def __init__(
        self,
        in_dim: int,
        out_channels: int,
        grid: tuple,
        patch_size: int,
        n_taps: int = 4,
        features: int = 32,
        image_skip: bool = True,
        out_bias: Optional[Sequence[float]] = None,
    ):
        super().__init__()
        self.grid = grid
        self.patch_size = patch_size
        self.n_taps = n_taps
        self.project = nn.ModuleList(nn.Linear(in_dim, features) for _ in range(n_taps))
        self.refine = nn.ModuleList(ResidualConv(features) for _ in range(n_taps))
        self.image_skip = nn.Conv2d(3, features, 3, padding=1) if image_skip else None
        self.out1 = nn.Conv2d(features, features, 3, padding=1)
        self.out2 = nn.Conv2d(features, out_channels, 1)
        nn.init.normal_(self.out2.weight, std=1e-3)
        with torch.no_grad():
            self.out2.bias.copy_(torch.as_tensor(out_bias if out_bias is not None else [0.0] * out_channels))

    def forward(self, taps: Sequence[torch.Tensor], images: Optional[torch.Tensor] = None) -> torch.Tensor:
        """taps: n_taps tensors (B, L, d); images: (B, 3, H, W). Returns (B, C, H, W)."""
        if len(taps) != self.n_taps:
            raise ValueError(f"dense head expects {self.n_taps} taps, got {len(taps)}")
        gh, gw = self.grid
        grids = [
            proj(t).transpose(1, 2).reshape(t.shape[0], -1, gh, gw) for proj, t in zip(self.project, taps)
        ]
        steps = self.n_taps - 1
        x = self.refine[-1](grids[-1])
        for k in range(steps - 1, -1, -1):
            size = (gh * 2 ** (steps - k), gw * 2 ** (steps - k))
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
            x = self.refine[k](x + F.interpolate(grids[k], size=size, mode="bilinear", align_corners=False))
        full = (gh * self.patch_size, gw * self.patch_size)
        if x.shape[-2:] != full:
            x = F.interpolate(x, size=full, mode="bilinear", align_corners=False)
        if self.image_skip is not None:
            if images is None:
                raise ValueError("this head needs the source images")
            x = x + self.image_skip(images - 0.5)
        return self.out2(F.relu(self.out1(F.relu(x))))
