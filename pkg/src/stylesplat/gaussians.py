"""Pixel-aligned Gaussian parameters and the activations that produce them."""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

SCALE_FLOOR = 1e-4
DEPTH_SCALE = 1.0
SGS_MAGIC = b"SGS1"


@dataclass
class RawGaussianParams:
    """Unconstrained head outputs, each shaped (..., N, H, W, C)."""

    raw_center: torch.Tensor
    raw_opacity: torch.Tensor
    raw_rotation: torch.Tensor
    raw_scale: torch.Tensor
    raw_color: torch.Tensor


@dataclass
class GaussianSet:
    """Gaussians flattened to (..., M, C); centers live in the first camera's frame."""

    means: torch.Tensor
    opacities: torch.Tensor
    rotations: torch.Tensor
    scales: torch.Tensor
    colors: torch.Tensor

    def __len__(self) -> int:
        return self.means.shape[-2]

    def with_colors(self, colors: torch.Tensor) -> "GaussianSet":
        return replace(self, colors=colors)

    def index(self, i) -> "GaussianSet":
        """Select along the leading (batch) dimension."""
        return GaussianSet(*(getattr(self, f.name)[i] for f in fields(self)))

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name).detach() for f in fields(self)))

    def to(self, *args, **kwargs) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name).to(*args, **kwargs) for f in fields(self)))


def _flatten(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(*x.shape[:-4], -1, x.shape[-1])


def activate(raw: RawGaussianParams, scale_floor: float = SCALE_FLOOR, depth_scale: float = DEPTH_SCALE) -> GaussianSet:
    """Map raw head outputs to valid Gaussian attributes.

    centers: (x, y, exp(z_raw) * depth_scale); opacity: sigmoid; rotation:
    normalized quaternion (w, x, y, z); scale: floor + softplus; color: sigmoid.
    """
    for f in fields(raw):
        if not torch.isfinite(getattr(raw, f.name)).all():
            raise ValueError(f"{f.name} contains non-finite values")
    norm = raw.raw_rotation.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("raw rotation has zero norm and cannot be normalized")
    c = raw.raw_center
    means = torch.cat([c[..., :2], torch.exp(c[..., 2:3]) * depth_scale], dim=-1)
    return GaussianSet(
        means=_flatten(means),
        opacities=_flatten(torch.sigmoid(raw.raw_opacity))[..., 0],
        rotations=_flatten(raw.raw_rotation / norm),
        scales=_flatten(scale_floor + F.softplus(raw.raw_scale)),
        colors=_flatten(torch.sigmoid(raw.raw_color)),
    )


def deactivate(gs: GaussianSet, scale_floor: float = SCALE_FLOOR, depth_scale: float = DEPTH_SCALE) -> RawGaussianParams:
    """Analytic inverse of :func:`activate` with a singleton (N, H, W) = (1, 1, M) layout."""

    def unflat(x):
        return x.reshape(*x.shape[:-2], 1, 1, x.shape[-2], x.shape[-1])

    m = gs.means
    raw_center = torch.cat([m[..., :2], torch.log(m[..., 2:3] / depth_scale)], dim=-1)
    return RawGaussianParams(
        raw_center=unflat(raw_center),
        raw_opacity=unflat(torch.logit(gs.opacities)[..., None]),
        raw_rotation=unflat(gs.rotations),
        raw_scale=unflat(torch.log(torch.expm1(gs.scales - scale_floor))),
        raw_color=unflat(torch.logit(gs.colors)),
    )


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from unit quaternions in (w, x, y, z) order."""
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def covariance(rotation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """World-space covariance R diag(s)^2 R^T."""
    R = quaternion_to_matrix(rotation)
    M = R * scale[..., None, :]
    return M @ M.transpose(-1, -2)


_RECORD = 14


def write_sgs(path, gs: GaussianSet) -> None:
    """Little-endian ``SGS1`` export: magic, uint32 count, then 14 float32 per Gaussian."""
    rows = torch.cat(
        [gs.means, gs.opacities[..., None], gs.rotations, gs.scales, gs.colors], dim=-1
    ).detach().cpu().numpy().astype("<f4")
    if rows.ndim != 2:
        raise ValueError("write_sgs expects an unbatched GaussianSet")
    with open(path, "wb") as fh:
        fh.write(SGS_MAGIC)
        fh.write(struct.pack("<I", rows.shape[0]))
        fh.write(rows.tobytes())


def read_sgs(path) -> GaussianSet:
    data = Path(path).read_bytes()
    if data[:4] != SGS_MAGIC:
        raise ValueError(f"{path}: not an SGS1 file")
    (count,) = struct.unpack("<I", data[4:8])
    rows = np.frombuffer(data[8:], dtype="<f4")
    if rows.size != count * _RECORD:
        raise ValueError(f"{path}: expected {count} records, found {rows.size / _RECORD:g}")
    t = torch.from_numpy(rows.reshape(count, _RECORD).copy())
    return GaussianSet(t[:, 0:3], t[:, 3], t[:, 4:8], t[:, 8:11], t[:, 11:14])
