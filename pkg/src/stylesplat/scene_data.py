"""Procedural multi-view scenes with exact cameras, depth and flow.

Scenes are small textured rooms filled with boxes, spheres and floating
panels.  Ground truth is produced by an analytic ray caster so that it never
depends on the Gaussian renderer.  Pixel ``(row i, col j)`` has its center at
image coordinates ``(u, v) = (j, i)``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

BACKGROUND_COLOR = np.array([0.5, 0.5, 0.5], dtype=np.float32)
BACKGROUND_DEPTH = 1.0e4
OCCLUSION_RTOL = 0.01
DATASET_VERSION = 1
MIN_FRAMES = 12


class DatasetError(Exception):
    """Base class for on-disk dataset problems."""


class MissingManifestError(DatasetError):
    pass


class ChecksumError(DatasetError):
    def __init__(self, path: str):
        super().__init__(f"checksum mismatch for {path}")
        self.path = path


class VersionError(DatasetError):
    pass


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float32).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float32).reshape(3)
        self.fx, self.fy = float(np.float32(self.fx)), float(np.float32(self.fy))
        self.cx, self.cy = float(np.float32(self.cx)), float(np.float32(self.cy))
        self.width, self.height = int(self.width), int(self.height)

    def validate(self) -> None:
        R = self.rotation.astype(np.float64)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        R = self.rotation.astype(np.float64)
        return -R.T @ self.translation.astype(np.float64)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera(self) -> np.ndarray:
        """4x4 homogeneous world->camera transform (float64)."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def relative_to(self, reference: "Camera") -> "Camera":
        """Same camera expressed with ``reference``'s camera frame as world."""
        T = self.world_to_camera() @ np.linalg.inv(reference.world_to_camera())
        return Camera(self.fx, self.fy, self.cx, self.cy, T[:3, :3], T[:3, 3], self.width, self.height)

    def to_bytes(self) -> bytes:
        values = np.concatenate(
            [self.rotation.reshape(-1), self.translation, np.array([self.fx, self.fy, self.cx, self.cy])]
        ).astype("<f4")
        return values.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, width: int, height: int) -> "Camera":
        v = np.frombuffer(data, dtype="<f4")
        if v.size != 16:
            raise DatasetError(f"camera record has {v.size} values, expected 16")
        return cls(v[12], v[13], v[14], v[15], v[:9].reshape(3, 3), v[9:12], width, height)

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return self.to_bytes() == other.to_bytes() and (self.width, self.height) == (other.width, other.height)


@dataclass(eq=False)
class ViewSample:
    image: np.ndarray
    camera: Camera
    depth: np.ndarray
    flow_to_next: Optional[np.ndarray] = None
    flow_valid: Optional[np.ndarray] = None


@dataclass(eq=False)
class StyleImage:
    image: np.ndarray
    id: str


@dataclass(eq=False)
class SceneRecord:
    scene_id: str
    views: list
    primitives: list = field(default_factory=list)


@dataclass
class SceneConfig:
    image_size: tuple = (64, 64)
    n_frames: int = 12
    n_primitives: tuple = (5, 10)
    patch_size: int = 8
    focal: Optional[float] = None
    arc_degrees: tuple = (20.0, 35.0)
    min_overlap: float = 0.3

    def validate(self) -> None:
        h, w = self.image_size
        if self.n_frames < MIN_FRAMES:
            raise ValueError(f"n_frames must be >= {MIN_FRAMES}, got {self.n_frames}")
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {h}x{w} is not divisible by patch size {self.patch_size}")
        lo, hi = self.n_primitives
        if not (5 <= lo <= hi <= 20):
            raise ValueError("primitive count range must lie within [5, 20]")


# ---------------------------------------------------------------------------
# textures and ray casting


def _random_color(rng: np.random.Generator) -> list:
    hue = rng.uniform(0, 1)
    sat = rng.uniform(0.3, 0.9)
    val = rng.uniform(0.35, 1.0)
    i = int(hue * 6) % 6
    f = hue * 6 - int(hue * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    rgb = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)][i]
    return [float(c) for c in rgb]


def _random_texture(rng: np.random.Generator) -> dict:
    direction = rng.normal(size=3)
    return {
        "pattern": str(rng.choice(["checker", "stripes", "rings", "waves"])),
        "color_a": _random_color(rng),
        "color_b": _random_color(rng),
        "frequency": float(rng.uniform(3.0, 8.0)),
        "phase": [float(x) for x in rng.uniform(0, 2 * np.pi, size=3)],
        "direction": [float(x) for x in direction / np.linalg.norm(direction)],
    }


def _shade(texture: dict, local: np.ndarray) -> np.ndarray:
    f = texture["frequency"]
    ph = np.asarray(texture["phase"])
    a = np.asarray(texture["direction"])
    kind = texture["pattern"]
    if kind == "checker":
        s = np.sin(f * local[:, 0] + ph[0]) * np.sin(f * local[:, 1] + ph[1]) * np.sin(f * local[:, 2] + ph[2])
        s = np.sign(s) * np.abs(s) ** (1 / 3)
    elif kind == "stripes":
        s = np.sin(f * local @ a + ph[0])
    elif kind == "rings":
        s = np.sin(f * np.linalg.norm(local, axis=1) + ph[0])
    else:
        s = 0.6 * np.sin(f * local @ a + ph[0]) + 0.4 * np.sin(0.7 * f * local[:, 1] + ph[1] + np.sin(f * local[:, 0]))
    m = 0.5 + 0.5 * np.tanh(3.0 * s)
    ca, cb = np.asarray(texture["color_a"]), np.asarray(texture["color_b"])
    return ca[None] * (1 - m[:, None]) + cb[None] * m[:, None]


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _intersect(prim: dict, origin: np.ndarray, dirs: np.ndarray):
    """Ray parameters (inf on miss) and object-local hit points for one primitive."""
    n = dirs.shape[0]
    t = np.full(n, np.inf)
    kind = prim["kind"]
    center = np.asarray(prim["center"], dtype=np.float64)
    if kind == "sphere":
        r = prim["radius"]
        oc = origin - center
        b = dirs @ oc
        c = oc @ oc - r * r
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        near = np.where(t0 > 1e-6, t0, t1)
        ok = hit & (near > 1e-6)
        t[ok] = near[ok]
        local = origin[None] + np.where(ok, t, 0.0)[:, None] * dirs - center
        local[~ok] = 0.0
        return t, local
    if kind == "box":
        R = _yaw_matrix(prim["yaw"])
        half = np.asarray(prim["half"])
        o = R.T @ (origin - center)
        d = dirs @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (-half[None] - o[None]) * inv
            tb = (half[None] - o[None]) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        near = np.where(tmin > 1e-6, tmin, tmax)
        ok = (tmax >= tmin) & (near > 1e-6)
        t[ok] = near[ok]
        local = o[None] + np.where(ok, t, 0.0)[:, None] * d
        local[~ok] = 0.0
        return t, local
    if kind == "quad":
        u = np.asarray(prim["u"])
        v = np.asarray(prim["v"])
        normal = np.cross(u, v)
        half = prim["half"]
        denom = dirs @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = ((center - origin) @ normal) / denom
        p = origin[None] + np.nan_to_num(tt, nan=0.0, posinf=0.0, neginf=0.0)[:, None] * dirs - center
        a, b = p @ u, p @ v
        ok = (np.abs(denom) > 1e-12) & (tt > 1e-6) & (np.abs(a) <= half[0]) & (np.abs(b) <= half[1])
        t[ok] = tt[ok]
        local = np.stack([a, b, np.zeros_like(a)], axis=1)
        local[~ok] = 0.0
        return t, local
    raise ValueError(f"unknown primitive kind {kind!r}")


def pixel_directions(camera: Camera) -> np.ndarray:
    """Unit ray directions in the camera frame, shape (H, W, 3)."""
    v, u = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones(u.shape)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def render_ground_truth(primitives: Sequence[dict], camera: Camera):
    """Ray-cast ``primitives``; returns (image HxWx3, depth HxW) as float32.

    Depth is the Euclidean distance from the camera center to the first hit.
    """
    camera.validate()
    R = camera.rotation.astype(np.float64)
    dirs = pixel_directions(camera).reshape(-1, 3) @ R  # rows: R^T d
    origin = camera.center
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    color = np.tile(BACKGROUND_COLOR.astype(np.float64), (n, 1))
    for prim in primitives:
        t, local = _intersect(prim, origin, dirs)
        closer = t < best_t
        if np.any(closer):
            best_t[closer] = t[closer]
            color[closer] = _shade(prim["texture"], local[closer])
    depth = np.where(np.isfinite(best_t), best_t, BACKGROUND_DEPTH)
    image = np.clip(color, 0.0, 1.0).reshape(camera.height, camera.width, 3)
    return image.astype(np.float32), depth.reshape(camera.height, camera.width).astype(np.float32)


# ---------------------------------------------------------------------------
# flow


def _bilinear_sample(field_: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = field_.shape[:2]
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    f = field_.reshape(h, w, -1)
    out = (
        f[y0, x0] * (1 - fx) * (1 - fy)
        + f[y0, x0 + 1] * fx * (1 - fy)
        + f[y0 + 1, x0] * (1 - fx) * fy
        + f[y0 + 1, x0 + 1] * fx * fy
    )
    return out.reshape(x.shape + field_.shape[2:])


def compute_gt_flow(view_i: ViewSample, view_j: ViewSample):
    """Exact forward flow from ``view_i`` to ``view_j`` plus validity mask."""
    ci, cj = view_i.camera, view_j.camera
    if (ci.height, ci.width) != (cj.height, cj.width) or view_i.depth.shape != view_j.depth.shape:
        raise ValueError("views have mismatched image sizes")
    h, w = ci.height, ci.width
    depth_i = view_i.depth.astype(np.float64)
    pts_i = pixel_directions(ci) * depth_i[..., None]
    Ri, ti = ci.rotation.astype(np.float64), ci.translation.astype(np.float64)
    Rj, tj = cj.rotation.astype(np.float64), cj.translation.astype(np.float64)
    world = (pts_i - ti) @ Ri  # R^T (x - t)
    pts_j = world @ Rj.T + tj
    z = pts_j[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        qx = cj.fx * pts_j[..., 0] / z + cj.cx
        qy = cj.fy * pts_j[..., 1] / z + cj.cy
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    flow = np.stack([qx - u, qy - v], axis=-1)
    inside = (z > 1e-6) & (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    inside &= depth_i < BACKGROUND_DEPTH
    rx = np.clip(np.rint(np.nan_to_num(qx)).astype(int), 0, w - 1)
    ry = np.clip(np.rint(np.nan_to_num(qy)).astype(int), 0, h - 1)
    observed = view_j.depth.astype(np.float64)[ry, rx]
    dist = np.linalg.norm(pts_j, axis=-1)
    visible = np.abs(dist - observed) <= OCCLUSION_RTOL * observed
    valid = inside & visible & (observed < BACKGROUND_DEPTH)
    flow = np.where(valid[..., None], flow, 0.0)
    return flow.astype(np.float32), valid


def flow_round_trip_error(view_i: ViewSample, view_j: ViewSample) -> np.ndarray:
    """Forward-backward displacement magnitude at pixels valid both ways (NaN elsewhere)."""
    f_ij, v_ij = compute_gt_flow(view_i, view_j)
    f_ji, v_ji = compute_gt_flow(view_j, view_i)
    h, w = v_ij.shape
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    qx, qy = u + f_ij[..., 0], v + f_ij[..., 1]
    x0 = np.clip(np.floor(qx).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(qy).astype(int), 0, h - 2)
    # all four taps must be valid and lie on the surface the point landed on
    ci, cj = view_i.camera, view_j.camera
    pts = pixel_directions(ci) * view_i.depth.astype(np.float64)[..., None]
    world = (pts - ci.translation.astype(np.float64)) @ ci.rotation.astype(np.float64)
    dist = np.linalg.norm(world @ cj.rotation.astype(np.float64).T + cj.translation.astype(np.float64), axis=-1)
    dj = view_j.depth.astype(np.float64)
    back_ok = np.ones_like(v_ij)
    for yy, xx in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
        back_ok &= v_ji[yy, xx] & (np.abs(dj[yy, xx] - dist) <= OCCLUSION_RTOL * dj[yy, xx])
    back = _bilinear_sample(f_ji.astype(np.float64), qx, qy)
    err = np.hypot(qx + back[..., 0] - u, qy + back[..., 1] - v)
    return np.where(v_ij & back_ok, err, np.nan)


# ---------------------------------------------------------------------------
# scene generation


def _room(rng: np.random.Generator) -> list:
    ex, ey, ez = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    walls = [
        ("floor", [0.0, 2.0, 4.0], ex, ez, [4.0, 6.0]),
        ("ceiling", [0.0, -2.0, 4.0], ex, ez, [4.0, 6.0]),
        ("back", [0.0, 0.0, 9.0], ex, ey, [4.0, 2.0]),
        ("left", [-4.0, 0.0, 4.0], ez, ey, [6.0, 2.0]),
        ("right", [4.0, 0.0, 4.0], ez, ey, [6.0, 2.0]),
        ("front", [0.0, 0.0, -2.0], ex, ey, [4.0, 2.0]),
    ]
    return [
        {"kind": "quad", "name": name, "center": c, "u": list(u), "v": list(v), "half": half,
         "texture": _random_texture(rng)}
        for name, c, u, v, half in walls
    ]


def _objects(rng: np.random.Generator, count: int) -> list:
    prims = []
    for _ in range(count):
        kind = rng.choice(["sphere", "box", "quad"])
        x, z = rng.uniform(-2.8, 2.8), rng.uniform(3.0, 7.5)
        if kind == "sphere":
            r = rng.uniform(0.35, 0.9)
            y = rng.choice([2.0 - r, rng.uniform(-1.0, 1.2)])
            prims.append({"kind": "sphere", "center": [x, float(y), z], "radius": r})
        elif kind == "box":
            half = rng.uniform(0.25, 0.8, size=3)
            y = rng.choice([2.0 - half[1], rng.uniform(-1.0, 1.2)])
            prims.append({"kind": "box", "center": [x, float(y), z], "half": [float(h) for h in half],
                          "yaw": float(rng.uniform(0, np.pi))})
        else:
            yaw = rng.uniform(-0.8, 0.8)
            u = _yaw_matrix(yaw) @ np.array([1.0, 0.0, 0.0])
            prims.append({"kind": "quad", "center": [x, float(rng.uniform(-1.0, 1.0)), z],
                          "u": [float(c) for c in u], "v": [0.0, 1.0, 0.0],
                          "half": [float(rng.uniform(0.4, 1.0)), float(rng.uniform(0.3, 0.9))]})
        prims[-1]["texture"] = _random_texture(rng)
    return prims


def look_at(position: np.ndarray, target: np.ndarray) -> tuple:
    """World->camera (R, t) for a camera at ``position`` looking at ``target`` (y down)."""
    z = target - position
    z = z / np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ position


def orbit_cameras(reference: Camera, n_frames: int, degrees: float = 6.0, pivot_depth: float = 4.5) -> list:
    """Cameras swinging +-``degrees`` around a point ``pivot_depth`` ahead of ``reference``.

    Returned cameras use ``reference``'s camera frame as world, like predicted Gaussians.
    """
    if n_frames < 1:
        raise ValueError("need at least one orbit frame")
    pivot = np.array([0.0, 0.0, pivot_depth])
    angles = np.deg2rad(np.linspace(-degrees, degrees, n_frames)) if n_frames > 1 else np.zeros(1)
    cams = []
    for a in angles:
        pos = pivot + np.array([-pivot_depth * np.sin(a), 0.0, -pivot_depth * np.cos(a)])
        R, t = look_at(pos, pivot)
        cams.append(Camera(reference.fx, reference.fy, reference.cx, reference.cy, R, t,
                           reference.width, reference.height))
    return cams


def _trajectory(rng: np.random.Generator, cfg: SceneConfig) -> list:
    h, w = cfg.image_size
    focal = cfg.focal or float(w)
    span = np.deg2rad(rng.uniform(*cfg.arc_degrees))
    span = min(span, np.deg2rad(9.0) * (cfg.n_frames - 1))
    start = rng.uniform(-0.5, 0.5) * np.deg2rad(15.0) - span / 2
    radius = rng.uniform(3.8, 4.6)
    pivot = np.array([0.0, rng.uniform(-0.2, 0.3), 4.5])
    height = rng.uniform(-0.4, 0.4)
    aim = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.2, 0.4), 0.0])
    cams = []
    for k in range(cfg.n_frames):
        theta = start + span * k / (cfg.n_frames - 1)
        pos = pivot + np.array([-radius * np.sin(theta), height, -radius * np.cos(theta)])
        R, t = look_at(pos, pivot + aim)
        cams.append(Camera(focal, focal, (w - 1) / 2, (h - 1) / 2, R, t, w, h))
    return cams


def generate_scene(seed: int, config: Optional[SceneConfig] = None, scene_id: Optional[str] = None) -> SceneRecord:
    """Build a deterministic textured room and a smooth camera arc through it."""
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(cfg.n_primitives[0], cfg.n_primitives[1] + 1))
    primitives = _room(rng) + _objects(rng, n_obj)
    views = []
    for cam in _trajectory(rng, cfg):
        image, depth = render_ground_truth(primitives, cam)
        views.append(ViewSample(image=image, camera=cam, depth=depth))
    for a, b in zip(views[:-1], views[1:]):
        a.flow_to_next, a.flow_valid = compute_gt_flow(a, b)
        overlap = a.flow_valid.mean()
        if overlap < cfg.min_overlap:
            raise SceneGenerationError(f"consecutive frames overlap only {overlap:.2f}")
    return SceneRecord(scene_id=scene_id or f"scene_{seed}", views=views, primitives=primitives)


def check_overlap(record: SceneRecord, minimum: float = 0.3) -> bool:
    return all(v.flow_valid is not None and v.flow_valid.mean() >= minimum for v in record.views[:-1])


# ---------------------------------------------------------------------------
# style corpus


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    coarse = rng.uniform(0, 1, size=(cells + 1, cells + 1))
    ys, xs = np.linspace(0, cells, h), np.linspace(0, cells, w)
    y0, x0 = np.minimum(ys.astype(int), cells - 1), np.minimum(xs.astype(int), cells - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + c * (1 - fx) * fy + d * fx * fy


def _palette_map(values: np.ndarray, palette: np.ndarray) -> np.ndarray:
    pos = np.clip(values, 0, 1) * (len(palette) - 1)
    i0 = np.minimum(pos.astype(int), len(palette) - 2)
    f = (pos - i0)[..., None]
    return palette[i0] * (1 - f) + palette[i0 + 1] * f


def _style_image(rng: np.random.Generator, family: str, h: int, w: int) -> np.ndarray:
    palette = np.array([_random_color(rng) for _ in range(int(rng.integers(2, 5)))])
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    if family == "noise":
        v = 0.6 * _smooth_noise(rng, h, w, int(rng.integers(3, 8))) + 0.4 * _smooth_noise(rng, h, w, 16)
    elif family == "stripes":
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(4, 12)
        v = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        v = 0.8 * v + 0.2 * _smooth_noise(rng, h, w, 8)
    elif family == "blobs":
        v = np.zeros((h, w))
        for _ in range(int(rng.integers(4, 10))):
            cx, cy, s = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.2)
            v += rng.uniform(0.4, 1.0) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        v = v / max(v.max(), 1e-6)
    else:
        angle = rng.uniform(0, 2 * np.pi)
        v = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) + 0.5
        v = 0.85 * v + 0.15 * _smooth_noise(rng, h, w, 4)
    img = _palette_map(v, palette)
    return np.clip(img, 0, 1).astype(np.float32)


STYLE_FAMILIES = ("noise", "stripes", "blobs", "wash")


def generate_style_corpus(seed: int, count: int, size: tuple = (64, 64)) -> list:
    """Procedural stand-ins for painting references, cycling through families."""
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w = size
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57]))
    styles = []
    for k in range(count):
        family = STYLE_FAMILIES[k % len(STYLE_FAMILIES)]
        styles.append(StyleImage(image=_style_image(rng, family, h, w), id=f"style_{seed}_{k:03d}"))
    return styles


def generate_dataset(seed: int, n_scenes: int, config: Optional[SceneConfig] = None) -> list:
    return [
        generate_scene(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), config,
                       scene_id=f"scene_{seed}_{k:03d}")
        for k in range(n_scenes)
    ]


# ---------------------------------------------------------------------------
# persistence


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_png(path: Path, image: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_dataset(records: Sequence[SceneRecord], styles: Sequence[StyleImage], root, meta: Optional[dict] = None) -> Path:
    """Write scenes and styles under ``root`` and a checksummed manifest."""
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "styles").mkdir(parents=True, exist_ok=True)
    files = []
    scenes_meta = []
    size = None
    for rec in records:
        sdir = root / "scenes" / rec.scene_id
        sdir.mkdir(parents=True, exist_ok=True)
        for k, view in enumerate(rec.views):
            size = [view.camera.height, view.camera.width]
            _write_png(sdir / f"frame_{k}.png", view.image)
            (sdir / f"frame_{k}.cam").write_bytes(view.camera.to_bytes())
            (sdir / f"frame_{k}.depth").write_bytes(view.depth.astype("<f4").tobytes())
            files += [sdir / f"frame_{k}.png", sdir / f"frame_{k}.cam", sdir / f"frame_{k}.depth"]
            if view.flow_to_next is not None:
                packed = np.concatenate([view.flow_to_next, view.flow_valid[..., None].astype(np.float32)], -1)
                (sdir / f"frame_{k}.flow").write_bytes(packed.astype("<f4").tobytes())
                files.append(sdir / f"frame_{k}.flow")
        (sdir / "primitives.json").write_text(json.dumps(rec.primitives))
        files.append(sdir / "primitives.json")
        scenes_meta.append({"id": rec.scene_id, "n_frames": len(rec.views)})
    for style in styles:
        _write_png(root / "styles" / f"{style.id}.png", style.image)
        files.append(root / "styles" / f"{style.id}.png")
        size = size or list(style.image.shape[:2])
    manifest = {
        "format": "stylesplat-dataset",
        "version": DATASET_VERSION,
        "image_size": size,
        "n_scenes": len(records),
        "n_styles": len(styles),
        "scenes": scenes_meta,
        "styles": [s.id for s in styles],
        "checksums": {str(p.relative_to(root)): _sha256(p) for p in files},
        "meta": meta or {},
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, root / "manifest.json")
    return root


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise MissingManifestError(f"missing manifest: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise VersionError(f"dataset version {manifest.get('version')} != supported {DATASET_VERSION}")
    return manifest


def load_dataset(root, verify: bool = True):
    """Inverse of :func:`save_dataset`; returns ``(records, styles)``."""
    root = Path(root)
    manifest = read_manifest(root)
    if verify:
        for rel, digest in sorted(manifest["checksums"].items()):
            p = root / rel
            if not p.is_file() or _sha256(p) != digest:
                raise ChecksumError(rel)
    h, w = manifest["image_size"]
    records = []
    for entry in manifest["scenes"]:
        sdir = root / "scenes" / entry["id"]
        views = []
        for k in range(entry["n_frames"]):
            cam = Camera.from_bytes((sdir / f"frame_{k}.cam").read_bytes(), w, h)
            depth = np.frombuffer((sdir / f"frame_{k}.depth").read_bytes(), dtype="<f4").reshape(h, w).copy()
            view = ViewSample(image=read_png(sdir / f"frame_{k}.png"), camera=cam, depth=depth)
            flow_path = sdir / f"frame_{k}.flow"
            if flow_path.is_file():
                packed = np.frombuffer(flow_path.read_bytes(), dtype="<f4").reshape(h, w, 3)
                view.flow_to_next = packed[..., :2].copy()
                view.flow_valid = packed[..., 2] > 0.5
            views.append(view)
        primitives = json.loads((sdir / "primitives.json").read_text())
        records.append(SceneRecord(scene_id=entry["id"], views=views, primitives=primitives))
    styles = [StyleImage(image=read_png(root / "styles" / f"{sid}.png"), id=sid) for sid in manifest["styles"]]
    return records, styles
