"""Consistency, novel-view and color-histogram metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .losses import default_backbone, perceptual_distance
from .renderer import render
from .scene_data import BACKGROUND_COLOR, SceneRecord, ViewSample, compute_gt_flow
from .training import span_range, view_selection

LONG_RANGE_OFFSET = 7
PSNR_CAP = 100.0
HIST_BINS = 64
HIST_EPS = 1e-4
HIST_RANGE = 3.0
COVERAGE_EPS = 1e-6


@dataclass
class ConsistencyReport:
    short_rmse: float
    short_perceptual: float
    long_rmse: float
    long_perceptual: float
    short_pairs: int
    long_pairs: int


@dataclass
class RgbUvHistogram:
    bins: np.ndarray
    n_bins: int
    epsilon: float


# ---------------------------------------------------------------------------
# forward warping


def warp_forward(frame: np.ndarray, flow: np.ndarray, valid: np.ndarray, depth: Optional[np.ndarray] = None):
    """Softmax-splat ``frame`` (H, W, C) along ``flow``; returns (warped, coverage).

    Each valid source pixel spreads bilinear weights to the four pixels around
    its target; collisions are blended with softmax weights on ``-depth``
    (uniform when depth is absent).
    """
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    if flow.shape[:2] != (h, w) or valid.shape != (h, w) or (depth is not None and depth.shape != (h, w)):
        raise ValueError("flow, valid and depth must match the frame size")
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sel = np.asarray(valid, dtype=bool)
    tx = (u + flow[..., 0])[sel].astype(np.float64)
    ty = (v + flow[..., 1])[sel].astype(np.float64)
    colors = frame[sel]
    if depth is not None:
        imp = -np.asarray(depth, dtype=np.float64)[sel]
        imp = np.exp(imp - imp.max()) if imp.size else imp
    else:
        imp = np.ones(tx.shape)
    x0, y0 = np.floor(tx).astype(int), np.floor(ty).astype(int)
    fx, fy = tx - x0, ty - y0
    num = np.zeros((h * w, frame.shape[2]))
    den = np.zeros(h * w)
    mass = np.zeros(h * w)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xx, yy = x0 + dx, y0 + dy
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h) & (wt > 0)
        idx = yy[ok] * w + xx[ok]
        np.add.at(mass, idx, wt[ok])
        np.add.at(den, idx, wt[ok] * imp[ok])
        np.add.at(num, idx, (wt[ok] * imp[ok])[:, None] * colors[ok])
    coverage = mass > COVERAGE_EPS
    warped = np.zeros_like(num)
    nz = den > 0
    warped[nz] = num[nz] / den[nz, None]
    return warped.reshape(h, w, -1), coverage.reshape(h, w)


# ---------------------------------------------------------------------------
# consistency


def trajectory_flows(views: Sequence[ViewSample], offsets: Sequence[int] = (1, LONG_RANGE_OFFSET)):
    """Exact flows and validity masks for every (k, k + offset) pair."""
    flows, valids = {}, {}
    for off in offsets:
        for k in range(len(views) - off):
            if off == 1 and views[k].flow_to_next is not None:
                flows[(k, k + 1)], valids[(k, k + 1)] = views[k].flow_to_next, views[k].flow_valid
            else:
                flows[(k, k + off)], valids[(k, k + off)] = compute_gt_flow(views[k], views[k + off])
    return flows, valids


def _pair_metrics(src, dst, flow, valid, depth, backbone):
    warped, cover = warp_forward(src, flow, valid, depth)
    mask = cover
    if not mask.any():
        return None
    diff = (warped - np.asarray(dst, dtype=np.float64))[mask]
    rmse = float(np.sqrt(np.mean(diff**2)))
    filled = np.where(mask[..., None], warped, dst)
    a = torch.from_numpy(filled.astype(np.float32))
    b = torch.from_numpy(np.asarray(dst, dtype=np.float32))
    perc = float(perceptual_distance(a, b, backbone))
    return rmse, perc


def consistency_metrics(frames: Sequence[np.ndarray], flows: Mapping, valids: Mapping,
                        depths: Optional[Sequence[np.ndarray]] = None, long_offset: int = LONG_RANGE_OFFSET,
                        backbone=None) -> ConsistencyReport:
    """Warp frame k onto k+1 (short range) and k+long_offset (long range) and score agreement."""
    n = len(frames)
    if n < long_offset + 1:
        raise ValueError(f"need at least {long_offset + 1} frames, got {n}")
    backbone = backbone or default_backbone()
    out = {}
    for label, off in (("short", 1), ("long", long_offset)):
        scores = []
        for k in range(n - off):
            d = depths[k] if depths is not None else None
            res = _pair_metrics(frames[k], frames[k + off], flows[(k, k + off)], valids[(k, k + off)], d, backbone)
            if res is not None:
                scores.append(res)
        if not scores:
            raise ValueError(f"no {label}-range pair has covered pixels")
        arr = np.array(scores)
        out[label] = (float(arr[:, 0].mean()), float(arr[:, 1].mean()), len(scores))
    return ConsistencyReport(out["short"][0], out["short"][1], out["long"][0], out["long"][1],
                             out["short"][2], out["long"][2])


def long_range_pairs(n_frames: int, offset: int = LONG_RANGE_OFFSET) -> list:
    return [(k, k + offset) for k in range(n_frames - offset)]


# ---------------------------------------------------------------------------
# novel-view metrics


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    a, b = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image sizes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(rendered: np.ndarray, target: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid-window positions and channels of (H, W, C) images in [0, 1]."""
    a = torch.as_tensor(np.asarray(rendered, dtype=np.float64)).movedim(-1, 0)[:, None]
    b = torch.as_tensor(np.asarray(target, dtype=np.float64)).movedim(-1, 0)[:, None]
    if a.shape != b.shape:
        raise ValueError("image sizes differ")
    k = _gaussian_window(window, sigma)[None, None]
    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = F.conv2d(a, k), F.conv2d(b, k)
    saa = F.conv2d(a * a, k) - mu_a**2
    sbb = F.conv2d(b * b, k) - mu_b**2
    sab = F.conv2d(a * b, k) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    return float(s.mean())


def nvs_metrics(rendered: np.ndarray, target: np.ndarray, backbone=None) -> dict:
    r = np.asarray(rendered, dtype=np.float32)
    t = np.asarray(target, dtype=np.float32)
    if r.shape != t.shape:
        raise ValueError("image sizes differ")
    perc = float(perceptual_distance(torch.from_numpy(r), torch.from_numpy(t), backbone))
    return {"psnr": psnr(r, t), "ssim": ssim(r, t), "perceptual": perc}


# ---------------------------------------------------------------------------
# colour histograms


def rgbuv_histogram(image: np.ndarray, n_bins: int = HIST_BINS, epsilon: float = HIST_EPS) -> RgbUvHistogram:
    """Intensity-weighted log-chroma histogram over [-3, 3]^2, normalized to unit mass."""
    img = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    r, g, b = img[:, 0], img[:, 1], img[:, 2]
    u = np.log((r + epsilon) / (g + epsilon))
    v = np.log((b + epsilon) / (g + epsilon))
    weight = np.sqrt(r * r + g * g + b * b)
    if weight.sum() <= 0:
        weight = np.ones_like(weight)
    scale = n_bins / (2 * HIST_RANGE)
    iu = np.clip(np.floor((u + HIST_RANGE) * scale).astype(int), 0, n_bins - 1)
    iv = np.clip(np.floor((v + HIST_RANGE) * scale).astype(int), 0, n_bins - 1)
    hist = np.zeros((n_bins, n_bins))
    np.add.at(hist, (iu, iv), weight)
    return RgbUvHistogram(hist / hist.sum(), n_bins, epsilon)


def histogram_distance(h1: RgbUvHistogram, h2: RgbUvHistogram) -> float:
    """Hellinger distance in [0, 1]."""
    if h1.n_bins != h2.n_bins or h1.bins.shape != h2.bins.shape:
        raise ValueError("histograms have different bin counts")
    bc = float(np.sum(np.sqrt(h1.bins * h2.bins)))
    return float(np.sqrt(max(0.0, 1.0 - bc)))


# ---------------------------------------------------------------------------
# model-level evaluation


def heldout_selection(n_frames: int, n_views: int, span: Optional[int] = None):
    lo, hi = span_range(n_views, 4, n_frames)
    span = span if span is not None else (lo + hi) // 2
    return view_selection(n_frames, n_views, 0, span)


def render_trajectory(model, record: SceneRecord, context: Sequence[int], appearance: torch.Tensor,
                      frames: Optional[Sequence[int]] = None) -> np.ndarray:
    """Render the scene's trajectory cameras from Gaussians predicted on ``context``."""
    images = torch.stack([torch.from_numpy(record.views[k].image).permute(2, 0, 1) for k in context])[None]
    ref = record.views[context[0]].camera
    frames = range(len(record.views)) if frames is None else frames
    with torch.no_grad():
        gs = model(images, appearance[None]).index(0)
        return np.stack([render(gs, record.views[k].camera.relative_to(ref), BACKGROUND_COLOR).color.numpy()
                         for k in frames])


def evaluate_nvs(model, records: Sequence[SceneRecord], n_views: int = 2, backbone=None) -> dict:
    """Content-as-style NVS metrics on held-out target frames, averaged over scenes."""
    model.eval()
    rows = []
    for rec in records:
        ctx, targets = heldout_selection(len(rec.views), n_views)
        app = torch.from_numpy(rec.views[ctx[0]].image).permute(2, 0, 1)
        renders = render_trajectory(model, rec, ctx, app, targets)
        for img, k in zip(renders, targets):
            rows.append(nvs_metrics(img, rec.views[k].image, backbone))
    return {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "perceptual")}


def write_report(rows: Sequence[dict], json_path, csv_path=None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(list(rows), indent=2))
    if csv_path is not None:
        keys = ["scene_id", "style_id", "short_rmse", "short_perceptual", "long_rmse", "long_perceptual",
                "psnr", "ssim", "perceptual", "hist_distance"]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)


def as_dict(report: ConsistencyReport) -> dict:
    return asdict(report)
