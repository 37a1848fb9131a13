"""Differentiable Gaussian splat rasterizer and a brute-force reference.

The fast path enumerates (Gaussian, pixel) pairs inside each splat's
footprint box, sorts them by (pixel, global depth rank) and composites front
to back with a per-pixel cumulative product.  The footprint box is the exact
axis-aligned extent of the ellipse where ``opacity * exp(-q/2) >= 1/255``, so
dropping pixels outside it never changes the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .gaussians import GaussianSet, quaternion_to_matrix
from .scene_data import Camera

NEAR_PLANE = 0.01
BLUR = 0.3
ALPHA_CUTOFF = 1.0 / 255.0

Background = Union[Sequence[float], torch.Tensor]


@dataclass
class Splat2D:
    """Projected splats, one row per surviving Gaussian."""

    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    color: torch.Tensor
    opacity: torch.Tensor
    source: torch.Tensor
    det: Optional[torch.Tensor] = None  # det(cov2d), when known in a cancellation-free form

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def __getitem__(self, i) -> "Splat2D":
        det = self.det[i] if self.det is not None else None
        return Splat2D(self.mean2d[i], self.cov2d[i], self.depth[i], self.color[i], self.opacity[i], self.source[i], det)


@dataclass
class RenderedImage:
    color: torch.Tensor  # (H, W, 3)
    accumulated_alpha: torch.Tensor  # (H, W)


def _camera_tensors(camera: Camera, like: torch.Tensor):
    R = torch.as_tensor(camera.rotation, dtype=like.dtype, device=like.device)
    t = torch.as_tensor(camera.translation, dtype=like.dtype, device=like.device)
    return R, t


def project(gaussians: GaussianSet, camera: Camera, blur: float = BLUR) -> Splat2D:
    """EWA-project Gaussians into ``camera``; those with z <= near plane are culled."""
    R, t = _camera_tensors(camera, gaussians.means)
    cam = gaussians.means @ R.T + t
    keep = torch.nonzero(cam[:, 2] > NEAR_PLANE).squeeze(1)
    cam = cam[keep]
    x, y, z = cam.unbind(-1)
    zinv = 1.0 / z
    mean2d = torch.stack([camera.fx * x * zinv + camera.cx, camera.fy * y * zinv + camera.cy], dim=-1)
    zeros = torch.zeros_like(z)
    J = torch.stack(
        [
            camera.fx * zinv, zeros, -camera.fx * x * zinv * zinv,
            zeros, camera.fy * zinv, -camera.fy * y * zinv * zinv,
        ],
        dim=-1,
    ).reshape(-1, 2, 3)
    # cov2d = B B^T + blur I with B = J W R_g S; det via Cauchy-Binet stays positive in float32
    B = (J @ R) @ quaternion_to_matrix(gaussians.rotations[keep]) * gaussians.scales[keep][:, None, :]
    cov2d = B @ B.transpose(-1, -2)
    cov2d = 0.5 * (cov2d + cov2d.transpose(-1, -2))
    cov2d = cov2d + blur * torch.eye(2, dtype=cov2d.dtype, device=cov2d.device)
    minors = torch.stack([B[:, 0, i] * B[:, 1, j] - B[:, 0, j] * B[:, 1, i] for i, j in ((0, 1), (0, 2), (1, 2))], -1)
    tr = (B * B).sum((-1, -2))
    det = blur * blur + blur * tr + (minors * minors).sum(-1)
    return Splat2D(mean2d, cov2d, z, gaussians.colors[keep], gaussians.opacities[keep], keep, det)


def _background(background: Background, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(background, dtype=like.dtype, device=like.device).reshape(3)


def _pixel_pairs(splats: Splat2D, height: int, width: int):
    """Footprint-box (splat, pixel) pairs; computed without gradients."""
    with torch.no_grad():
        op = splats.opacity
        reach = 2.0 * torch.log(torch.clamp(op * 255.0, min=1e-30))
        reach = torch.clamp(reach, min=0.0)
        rx = torch.sqrt(reach * splats.cov2d[:, 0, 0]) * 1.0001 + 1e-4
        ry = torch.sqrt(reach * splats.cov2d[:, 1, 1]) * 1.0001 + 1e-4
        mx, my = splats.mean2d[:, 0], splats.mean2d[:, 1]
        x0 = torch.clamp(torch.ceil(mx - rx), min=0).long()
        x1 = torch.clamp(torch.floor(mx + rx), max=width - 1).long()
        y0 = torch.clamp(torch.ceil(my - ry), min=0).long()
        y1 = torch.clamp(torch.floor(my + ry), max=height - 1).long()
        live = (op >= ALPHA_CUTOFF) & (x1 >= x0) & (y1 >= y0)
        wx = torch.where(live, x1 - x0 + 1, 0)
        wy = torch.where(live, y1 - y0 + 1, 0)
        counts = wx * wy
        total = int(counts.sum())
        idx = torch.repeat_interleave(torch.arange(len(op), device=op.device), counts)
        offsets = torch.cumsum(counts, 0) - counts
        local = torch.arange(total, device=op.device) - offsets[idx]
        px = x0[idx] + local % wx[idx]
        py = y0[idx] + torch.div(local, wx[idx], rounding_mode="floor")
    return idx, px, py


def composite(splats: Splat2D, height: int, width: int, background: Background = (0.5, 0.5, 0.5)) -> RenderedImage:
    """Front-to-back alpha compositing over a global depth order."""
    like = splats.mean2d
    bg = _background(background, like)
    n_pix = height * width
    if len(splats) == 0:
        color = bg.expand(height, width, 3).clone()
        return RenderedImage(color, torch.zeros(height, width, dtype=like.dtype, device=like.device))
    cov = splats.cov2d
    det = splats.det if splats.det is not None else cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    finite = bool(torch.isfinite(cov).all()) and bool(torch.isfinite(det).all())
    if not finite or not bool(((det > 0) & (cov[:, 0, 0] > 0)).all()) or not torch.allclose(cov[:, 0, 1], cov[:, 1, 0]):
        raise ValueError("cov2d must be symmetric positive definite")

    idx, px, py = _pixel_pairs(splats, height, width)
    if idx.numel() == 0:
        color = bg.expand(height, width, 3).clone()
        return RenderedImage(color, torch.zeros(height, width, dtype=like.dtype, device=like.device))

    dx = px.to(like.dtype) - splats.mean2d[idx, 0]
    dy = py.to(like.dtype) - splats.mean2d[idx, 1]
    d = det[idx]
    a, b, c = cov[idx, 1, 1] / d, -cov[idx, 0, 1] / d, cov[idx, 0, 0] / d  # conic
    power = -0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy)
    alpha = splats.opacity[idx] * torch.exp(power)

    with torch.no_grad():
        keep = alpha >= ALPHA_CUTOFF
        rank = torch.empty(len(splats), dtype=torch.long, device=like.device)
        rank[torch.sort(splats.depth, stable=True).indices] = torch.arange(len(splats), device=like.device)
        pix = py * width + px
        key = pix * len(splats) + rank[idx]
        key = torch.where(keep, key, torch.full_like(key, -1))
        order = torch.argsort(key)
        order = order[keep[order]]
        pix_sorted = pix[order]
        counts = torch.bincount(pix_sorted, minlength=n_pix)
        starts = torch.cumsum(counts, 0) - counts
        pos = torch.arange(len(order), device=like.device) - starts[pix_sorted]
        depth_max = int(counts.max()) if len(order) else 0

    if depth_max == 0:
        color = bg.expand(height, width, 3).clone()
        return RenderedImage(color, torch.zeros(height, width, dtype=like.dtype, device=like.device))

    layers = torch.zeros(n_pix, depth_max, dtype=like.dtype, device=like.device)
    layers = layers.index_put((pix_sorted, pos), alpha[order])
    trans = torch.cumprod(1.0 - layers, dim=1)
    before = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    weight = (layers * before)[pix_sorted, pos]
    src_color = splats.color[idx[order]]
    color = torch.zeros(n_pix, 3, dtype=like.dtype, device=like.device)
    color = color.index_add(0, pix_sorted, weight[:, None] * src_color)
    residual = trans[:, -1]
    color = color + residual[:, None] * bg
    return RenderedImage(color.reshape(height, width, 3), (1.0 - residual).reshape(height, width))


def render(gaussians: GaussianSet, camera: Camera, background: Background = (0.5, 0.5, 0.5)) -> RenderedImage:
    return composite(project(gaussians, camera), camera.height, camera.width, background)


# ---------------------------------------------------------------------------
# reference implementation (numpy, float64, no footprint boxes)


def _quat_matrix_np(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q.T
    out = np.empty((len(q), 3, 3))
    out[:, 0] = np.stack([w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    out[:, 1] = np.stack([2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)], -1)
    out[:, 2] = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z], -1)
    return out


def render_brute_force(gaussians: GaussianSet, camera: Camera, background: Background = (0.5, 0.5, 0.5)) -> RenderedImage:
    """Per-pixel exact evaluation of every splat with per-pixel depth sorting."""
    g = {k: getattr(gaussians, k).detach().cpu().double().numpy() for k in
         ("means", "opacities", "rotations", "scales", "colors")}
    bg = np.asarray(torch.as_tensor(background).detach().cpu(), dtype=np.float64).reshape(3)
    H, W = camera.height, camera.width
    R = camera.rotation.astype(np.float64)
    cam = g["means"] @ R.T + camera.translation.astype(np.float64)
    front = cam[:, 2] > NEAR_PLANE
    cam = cam[front]
    if len(cam) == 0:
        return RenderedImage(torch.from_numpy(np.tile(bg, (H, W, 1))), torch.zeros(H, W, dtype=torch.float64))
    rot = _quat_matrix_np(g["rotations"][front])
    s = g["scales"][front]
    sigma = np.einsum("nij,nj,nkj->nik", rot, s * s, rot)
    x, y, z = cam.T
    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / z**2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / z**2
    JW = J @ R
    cov = JW @ sigma @ np.transpose(JW, (0, 2, 1)) + BLUR * np.eye(2)
    inv = np.linalg.inv(cov)
    mean = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], -1)

    v, u = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pix = np.stack([u.ravel(), v.ravel()], -1).astype(np.float64)
    d = pix[:, None, :] - mean[None]  # (P, M, 2)
    q = np.einsum("pmi,mij,pmj->pm", d, inv, d)
    alpha = g["opacities"][front][None] * np.exp(-0.5 * q)
    alpha = np.where(alpha >= ALPHA_CUTOFF, alpha, 0.0)
    colors = g["colors"][front]
    out = np.empty((len(pix), 3))
    acc = np.empty(len(pix))
    for p in range(len(pix)):
        order = np.argsort(np.where(alpha[p] > 0, z, np.inf), kind="stable")
        a = alpha[p, order]
        transmit = np.concatenate([[1.0], np.cumprod(1.0 - a)])
        out[p] = (a * transmit[:-1]) @ colors[order] + transmit[-1] * bg
        acc[p] = 1.0 - transmit[-1]
    return RenderedImage(torch.from_numpy(out.reshape(H, W, 3)), torch.from_numpy(acc.reshape(H, W)))


def footprint_alpha(splat: Splat2D, pixel: Sequence[float]) -> float:
    """Closed-form alpha of a single projected splat at one pixel."""
    d = np.asarray(pixel, dtype=np.float64) - splat.mean2d.detach().double().numpy()
    inv = np.linalg.inv(splat.cov2d.detach().double().numpy())
    return float(splat.opacity) * math.exp(-0.5 * d @ inv @ d)
