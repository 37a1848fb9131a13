"""Structure branch: cross-view decoder and the geometry heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import Attention, Mlp, init_weights
from .heads import DenseHead


@dataclass
class StructureConfig:
    width: int = 192
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    taps: tuple = (1, 3, 5, 6)
    head_features: int = 32
    init_depth: float = 5.0
    init_scale: float = 0.03
    init_opacity: float = 0.7


@dataclass
class DecodedStructureTokens:
    tokens: torch.Tensor  # (B, N, L, d')
    taps: dict = field(default_factory=dict)  # block index (1-based) -> (B, N, L, d')


@dataclass
class StructureOutput:
    raw_center: torch.Tensor  # (B, N, H, W, 3)
    raw_rotation: torch.Tensor  # (B, N, H, W, 4)
    raw_scale: torch.Tensor  # (B, N, H, W, 3)
    raw_opacity: torch.Tensor  # (B, N, H, W, 1)


class CrossViewBlock(nn.Module):
    """Self-attention within a view, then cross-attention to all other views."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, N, L, d)."""
        b, n, l, d = x.shape
        x = x + self.self_attn(self.norm1(x))
        ctx = self.norm_ctx(x)
        others = torch.stack([torch.cat([ctx[:, j] for j in range(n) if j != i], dim=1) for i in range(n)], dim=1)
        x = x + self.cross_attn(self.norm2(x), others)
        return x + self.mlp(self.norm3(x))


class StructureDecoder(nn.Module):
    def __init__(self, in_dim: int, config: StructureConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(in_dim, config.width)
        # marks the reference view whose camera frame hosts all centers
        self.view_embed = nn.Parameter(torch.zeros(2, config.width))
        self.blocks = nn.ModuleList(
            CrossViewBlock(config.width, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.apply(init_weights)
        nn.init.trunc_normal_(self.view_embed, std=0.02)

    def forward(self, content_tokens: torch.Tensor) -> DecodedStructureTokens:
        """content_tokens: (B, N, L, d) with N >= 2."""
        n = content_tokens.shape[1]
        if n < 2:
            raise ValueError(f"structure decoding needs at least 2 views, got {n}")
        role = torch.ones(n, dtype=torch.long, device=content_tokens.device)
        role[0] = 0
        x = self.input_proj(content_tokens) + self.view_embed[role][None, :, None, :]
        taps = {}
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in self.config.taps:
                taps[i] = x
        return DecodedStructureTokens(tokens=x, taps=taps)


def _gather_taps(decoded: DecodedStructureTokens, wanted: tuple) -> list:
    missing = [t for t in wanted if t not in decoded.taps]
    if missing:
        raise ValueError(f"decoded tokens are missing taps {missing}")
    return [decoded.taps[t] for t in wanted]


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class CenterHead(nn.Module):
    """Dense head regressing per-pixel centers in the reference camera frame.

    The head predicts a log-depth and a pixel-ray offset; the raw center is
    laid out so that the standard activation yields (x, y, z) with
    ``(x, y) = (ray + offset) * z``.
    """

    def __init__(self, config: StructureConfig, grid: tuple, patch_size: int, intrinsics: tuple):
        super().__init__()
        self.taps = config.taps
        self.head = DenseHead(config.width, 3, grid, patch_size, len(config.taps), config.head_features,
                              out_bias=[0.0, 0.0, math.log(config.init_depth)])
        fx, fy, cx, cy = intrinsics
        h, w = grid[0] * patch_size, grid[1] * patch_size
        v, u = torch.meshgrid(torch.arange(h, dtype=torch.float32), torch.arange(w, dtype=torch.float32), indexing="ij")
        self.register_buffer("rays", torch.stack([(u - cx) / fx, (v - cy) / fy]), persistent=False)

    def forward(self, decoded: DecodedStructureTokens, images: torch.Tensor) -> torch.Tensor:
        taps = _gather_taps(decoded, self.taps)
        b, n = taps[0].shape[:2]
        out = self.head([t.flatten(0, 1) for t in taps], images.flatten(0, 1))
        log_z = out[:, 2:3]
        xy = (self.rays.to(out.dtype) + out[:, :2]) * torch.exp(log_z)
        raw = torch.cat([xy, log_z], dim=1)
        return raw.reshape(b, n, 3, *raw.shape[-2:]).movedim(2, -1)


class AttributeHead(nn.Module):
    """Dense head regressing rotation (4), scale (3) and opacity (1) per pixel."""

    def __init__(self, config: StructureConfig, grid: tuple, patch_size: int):
        super().__init__()
        self.taps = config.taps
        s = _inverse_softplus(config.init_scale)
        o = math.log(config.init_opacity / (1 - config.init_opacity))
        self.head = DenseHead(config.width, 8, grid, patch_size, len(config.taps), config.head_features,
                              out_bias=[1.0, 0.0, 0.0, 0.0, s, s, s, o])

    def forward(self, decoded: DecodedStructureTokens, images: torch.Tensor):
        taps = _gather_taps(decoded, self.taps)
        b, n = taps[0].shape[:2]
        out = self.head([t.flatten(0, 1) for t in taps], images.flatten(0, 1))
        out = out.reshape(b, n, 8, *out.shape[-2:]).movedim(2, -1)
        return out[..., :4], out[..., 4:7], out[..., 7:8]
