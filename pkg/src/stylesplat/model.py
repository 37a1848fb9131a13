"""The dual-branch feed-forward stylization network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .appearance import AppearanceConfig, BlendedTokens, ColorHead, StylizationDecoder, interpolate_styles
from .backbone import BackboneConfig, TokenGrid, ViTEncoder
from .gaussians import GaussianSet, RawGaussianParams, activate
from .structure import AttributeHead, CenterHead, StructureConfig, StructureDecoder, StructureOutput

MIN_VIEWS, MAX_VIEWS = 2, 8

# parameter groups, by top-level submodule
CONTENT_ENCODER = "content_encoder"
STYLE_ENCODER = "style_encoder"
STRUCTURE_DECODER = "structure_decoder"
CENTER_HEAD = "center_head"
ATTRIBUTE_HEAD = "attribute_head"
STYLIZATION_DECODER = "stylization_decoder"
COLOR_HEAD = "color_head"
STRUCTURE_MODULES = (CONTENT_ENCODER, STRUCTURE_DECODER, CENTER_HEAD, ATTRIBUTE_HEAD)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    structure: StructureConfig = field(default_factory=StructureConfig)
    appearance: AppearanceConfig = field(default_factory=AppearanceConfig)
    intrinsics: Optional[tuple] = None  # (fx, fy, cx, cy); defaults from the image size
    seed: int = 0

    def resolved_intrinsics(self) -> tuple:
        if self.intrinsics is not None:
            return tuple(float(v) for v in self.intrinsics)
        h, w = self.backbone.image_size
        return (float(w), float(w), (w - 1) / 2, (h - 1) / 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        bb = dict(data.pop("backbone", {}))
        if "image_size" in bb:
            bb["image_size"] = tuple(bb["image_size"])
        st = dict(data.pop("structure", {}))
        if "taps" in st:
            st["taps"] = tuple(st["taps"])
        intr = data.pop("intrinsics", None)
        return cls(
            backbone=BackboneConfig(**bb),
            structure=StructureConfig(**st),
            appearance=AppearanceConfig(**data.pop("appearance", {})),
            intrinsics=tuple(intr) if intr is not None else None,
            **data,
        )


def check_view_count(n: int) -> None:
    if not MIN_VIEWS <= n <= MAX_VIEWS:
        raise ValueError(f"number of content views must be in [{MIN_VIEWS}, {MAX_VIEWS}], got {n}")


class StylizationNet(nn.Module):
    """Structure branch (content encoder, cross-view decoder, two heads) plus an
    appearance branch (style encoder, stylization decoder, color head)."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        bb = config.backbone
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.content_encoder = ViTEncoder(bb)
            self.style_encoder = ViTEncoder(bb)
            self.structure_decoder = StructureDecoder(bb.width, config.structure)
            self.center_head = CenterHead(config.structure, bb.grid, bb.patch_size, config.resolved_intrinsics())
            self.attribute_head = AttributeHead(config.structure, bb.grid, bb.patch_size)
            self.stylization_decoder = StylizationDecoder(bb.width, config.appearance)
            self.color_head = ColorHead(bb.width, bb.grid, bb.patch_size, config.appearance.depth,
                                        config.appearance.head_features)

    # -- encoders ---------------------------------------------------------
    def encode_content(self, images: torch.Tensor) -> torch.Tensor:
        """(B, N, 3, H, W) -> (B, N, L, d) with one shared encoder."""
        check_view_count(images.shape[1])
        b, n = images.shape[:2]
        tokens = self.content_encoder(images.flatten(0, 1))
        return tokens.reshape(b, n, *tokens.shape[1:])

    def encode_style(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, L, d)."""
        return self.style_encoder(images)

    # -- branches -----------------------------------------------------------
    def structure(self, content_tokens: torch.Tensor, images: torch.Tensor) -> StructureOutput:
        decoded = self.structure_decoder(content_tokens)
        center = self.center_head(decoded, images)
        rotation, scale, opacity = self.attribute_head(decoded, images)
        return StructureOutput(raw_center=center, raw_rotation=rotation, raw_scale=scale, raw_opacity=opacity)

    def stylize_tokens(self, content_tokens: torch.Tensor, style_tokens: torch.Tensor) -> BlendedTokens:
        return self.stylization_decoder(content_tokens, style_tokens)

    def colors_from_style_tokens(self, content_tokens, style_tokens, images) -> torch.Tensor:
        return self.color_head(self.stylize_tokens(content_tokens, style_tokens), images)

    def appearance(self, content_tokens: torch.Tensor, appearance_images: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
        """Raw colors (B, N, H, W, 3) for a style image or a content view per scene."""
        if appearance_images.shape[-2:] != images.shape[-2:]:
            raise ValueError("appearance image size differs from the content views")
        return self.colors_from_style_tokens(content_tokens, self.encode_style(appearance_images), images)

    @staticmethod
    def assemble(structure: StructureOutput, raw_color: torch.Tensor) -> GaussianSet:
        return activate(RawGaussianParams(structure.raw_center, structure.raw_opacity,
                                          structure.raw_rotation, structure.raw_scale, raw_color))

    def forward(self, images: torch.Tensor, appearance_images: torch.Tensor) -> GaussianSet:
        """images: (B, N, 3, H, W); appearance_images: (B, 3, H, W)."""
        tokens = self.encode_content(images)
        structure = self.structure(tokens, images)
        return self.assemble(structure, self.appearance(tokens, appearance_images, images))

    def forward_interpolated(self, images: torch.Tensor, styles: Sequence[torch.Tensor], weights: Sequence[float]) -> GaussianSet:
        tokens = self.encode_content(images)
        structure = self.structure(tokens, images)
        style_tokens = interpolate_styles([self.encode_style(s) for s in styles], weights)
        return self.assemble(structure, self.colors_from_style_tokens(tokens, style_tokens, images))

    # -- parameter bookkeeping --------------------------------------------
    def parameter_groups(self) -> dict:
        return {name: list(getattr(self, name).parameters()) for name in
                (CONTENT_ENCODER, STYLE_ENCODER, STRUCTURE_DECODER, CENTER_HEAD, ATTRIBUTE_HEAD,
                 STYLIZATION_DECODER, COLOR_HEAD)}

    def token_grids(self, tokens: torch.Tensor) -> list:
        """Wrap (N, L, d) tokens of one scene as TokenGrids."""
        gh, gw = self.config.backbone.grid
        return [TokenGrid(tokens[i], gh, gw, view_id=i) for i in range(tokens.shape[0])]
