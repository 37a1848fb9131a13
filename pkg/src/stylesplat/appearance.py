"""Appearance branch: stylization decoder, color head and style interpolation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import torch
import torch.nn as nn

from .backbone import Attention, Mlp, TokenGrid, init_weights
from .heads import DenseHead


@dataclass
class AppearanceConfig:
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    head_features: int = 32


@dataclass
class BlendedTokens:
    tokens: torch.Tensor  # (B, N*L, d)
    n_views: int
    taps: list = field(default_factory=list)


class CrossAttention(Attention):
    """Queries from content tokens, keys and values from style tokens."""

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:  # type: ignore[override]
        return super().forward(content, style)


class StylizationBlock(nn.Module):
    """Global self-attention over all views, cross-attention to style, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_style = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), self.norm_style(style))
        return x + self.mlp(self.norm3(x))


class StylizationDecoder(nn.Module):
    def __init__(self, dim: int, config: AppearanceConfig):
        super().__init__()
        self.blocks = nn.ModuleList(StylizationBlock(dim, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.apply(init_weights)

    def forward(self, content_tokens: torch.Tensor, style_tokens: torch.Tensor) -> BlendedTokens:
        """content_tokens: (B, N, L, d); style_tokens: (B, L_s, d)."""
        if content_tokens.shape[-1] != style_tokens.shape[-1]:
            raise ValueError("content and style token widths differ")
        b, n, l, d = content_tokens.shape
        x = content_tokens.reshape(b, n * l, d)
        taps = []
        for blk in self.blocks:
            x = blk(x, style_tokens)
            taps.append(x)
        return BlendedTokens(tokens=x, n_views=n, taps=taps)


class ColorHead(nn.Module):
    def __init__(self, dim: int, grid: tuple, patch_size: int, n_taps: int, features: int):
        super().__init__()
        self.n_taps = n_taps
        self.head = DenseHead(dim, 3, grid, patch_size, n_taps, features)

    def forward(self, blended: BlendedTokens, images: torch.Tensor) -> torch.Tensor:
        """Returns raw colors (B, N, H, W, 3); ``images`` are the content views (B, N, 3, H, W)."""
        if len(blended.taps) != self.n_taps:
            raise ValueError(f"color head expects {self.n_taps} taps, got {len(blended.taps)}")
        n = blended.n_views
        b = blended.tokens.shape[0]
        taps = [t.reshape(b * n, -1, t.shape[-1]) for t in blended.taps]
        out = self.head(taps, images.flatten(0, 1))
        return out.reshape(b, n, 3, *out.shape[-2:]).movedim(2, -1)


TokensLike = Union[torch.Tensor, TokenGrid]


def interpolate_styles(style_token_sets: Sequence[TokensLike], weights: Sequence[float]) -> TokensLike:
    """Convex combination of style token sets (weights must sum to 1)."""
    if len(style_token_sets) != len(weights) or not style_token_sets:
        raise ValueError("need one weight per style token set")
    total = float(sum(float(w) for w in weights))
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"interpolation weights sum to {total}, expected 1")
    grids = [s for s in style_token_sets if isinstance(s, TokenGrid)]
    tensors = [s.tokens if isinstance(s, TokenGrid) else s for s in style_token_sets]
    if any(t.shape != tensors[0].shape for t in tensors):
        raise ValueError("style token sets have different shapes")
    out = tensors[0] * float(weights[0])
    for t, w in zip(tensors[1:], weights[1:]):
        out = out + t * float(w)
    if grids:
        return TokenGrid(out, grids[0].grid_h, grids[0].grid_w, grids[0].view_id)
    return out
