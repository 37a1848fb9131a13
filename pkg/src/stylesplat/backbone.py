"""Patch embedding, attention blocks and the ViT image encoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BackboneConfig:
    patch_size: int = 8
    width: int = 192
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    image_size: tuple = (64, 64)

    def validate(self) -> None:
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {h}x{w} is not divisible by patch size {self.patch_size}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def grid(self) -> tuple:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (L, d)
    grid_h: int
    grid_w: int
    view_id: int = 0

    def __post_init__(self):
        if self.tokens.shape[-2] != self.grid_h * self.grid_w:
            raise ValueError("token count does not match grid shape")


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(..., H, W, C) -> (..., L, p*p*C), patches in row-major order."""
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {p}")
    x = image.reshape(*lead, h // p, p, w // p, p, c)
    x = x.transpose(-4, -3)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(patches: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    *lead, n, dim = patches.shape
    p = patch_size
    c = dim // (p * p)
    x = patches.reshape(*lead, height // p, width // p, p, p, c)
    x = x.transpose(-4, -3)
    return x.reshape(*lead, height, width, c)


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    """Multi-head attention with separate query/key/value projections."""

    def __init__(self, dim: int, heads: int, context_dim: Optional[int] = None):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(context_dim, dim)
        self.v_proj = nn.Linear(context_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).transpose(-2, -3)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(-2, -3).reshape(x.shape)
        return self.out_proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, dim: int, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size * patch_size * in_chans, dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(..., C, H, W) -> (..., L, dim)."""
        return self.proj(patchify(images.movedim(-3, -1), self.patch_size))


class ViTEncoder(nn.Module):
    """Patch embedding + learned absolute positions + transformer blocks."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.patch_embed = PatchEmbed(config.patch_size, config.width)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.n_tokens, config.width))
        self.blocks = nn.ModuleList(Block(config.width, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.width)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, L, d)."""
        if tuple(images.shape[-2:]) != tuple(self.config.image_size):
            raise ValueError(f"expected images of size {self.config.image_size}, got {tuple(images.shape[-2:])}")
        x = self.patch_embed(images - 0.5) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)
