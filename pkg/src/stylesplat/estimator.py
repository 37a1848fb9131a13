"""scikit-learn style facade over the curriculum and inference paths."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import evaluate_nvs
from .model import MAX_VIEWS, MIN_VIEWS, ModelConfig, StylizationNet
from .renderer import render
from .scene_data import BACKGROUND_COLOR, Camera, SceneRecord, StyleImage
from .training import Checkpoint, TrainConfig, load_checkpoint, progressive_schedule


def check_image(image, size: Optional[tuple] = None, name: str = "image") -> np.ndarray:
    """(H, W, 3) float32 in [0, 1]; uint8 input is rescaled."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    if size is not None and arr.shape[:2] != tuple(size):
        raise ValueError(f"{name} is {arr.shape[0]}x{arr.shape[1]}, model expects {size[0]}x{size[1]}")
    return arr


def check_views(views, size: Optional[tuple] = None) -> np.ndarray:
    """Stack content views into (N, H, W, 3) with 2 <= N <= 8."""
    items = list(views)
    if not MIN_VIEWS <= len(items) <= MAX_VIEWS:
        raise ValueError(f"number of content views must be in [{MIN_VIEWS}, {MAX_VIEWS}], got {len(items)}")
    arrs = [check_image(v, size, f"view {i}") for i, v in enumerate(items)]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("content views differ in size")
    return np.stack(arrs)


def check_style(style, size: Optional[tuple] = None) -> np.ndarray:
    if isinstance(style, StyleImage):
        style = style.image
    return check_image(style, size, "style image")


def check_cameras(cameras: Sequence[Camera], size: Optional[tuple] = None) -> list:
    cams = list(cameras)
    if not cams:
        raise ValueError("need at least one target camera")
    for cam in cams:
        if not isinstance(cam, Camera):
            raise TypeError(f"expected Camera, got {type(cam).__name__}")
        cam.validate()
        if size is not None and (cam.height, cam.width) != tuple(size):
            raise ValueError("camera resolution differs from the model image size")
    return cams


def _chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)


class FeedForwardStylizer(BaseEstimator, TransformerMixin):
    """Train with :meth:`fit`; map content views (+ a style) to Gaussians with :meth:`transform`
    and to rendered images with :meth:`predict`.

    ``model_config`` is a nested dict of architecture overrides (see ``ModelConfig``).
    """

    def __init__(self, n_views: int = 4, nvs2_steps: int = 2000, nvs4_steps: int = 2000, stylize_steps: int = 2000,
                 batch_size: int = 2, lr_high: float = 1e-3, lr_low: float = 1e-4, identity_loss: bool = True,
                 image_size: tuple = (64, 64), seed: int = 0, out_dir: Optional[str] = None,
                 model_config: Optional[dict] = None):
        self.n_views = n_views
        self.nvs2_steps = nvs2_steps
        self.nvs4_steps = nvs4_steps
        self.stylize_steps = stylize_steps
        self.batch_size = batch_size
        self.lr_high = lr_high
        self.lr_low = lr_low
        self.identity_loss = identity_loss
        self.image_size = image_size
        self.seed = seed
        self.out_dir = out_dir
        self.model_config = model_config

    # -- training ---------------------------------------------------------
    def fit(self, X: Sequence[SceneRecord], y: Sequence[StyleImage]):
        """X: training scenes; y: style images for the fine-tuning stage."""
        if not X:
            raise ValueError("need at least one training scene")
        styles = [s if isinstance(s, StyleImage) else StyleImage(check_style(s, self.image_size), f"style_{i}")
                  for i, s in enumerate(y)]
        if not styles:
            raise ValueError("need at least one style image")
        for rec in X:
            check_image(rec.views[0].image, self.image_size, f"scene {rec.scene_id}")
        config = TrainConfig(batch_size=self.batch_size, lr_high=self.lr_high, lr_low=self.lr_low,
                             identity_loss=self.identity_loss, seed=self.seed)
        model_config = ModelConfig.from_dict(dict(self.model_config or {}, seed=self.seed))
        model_config.backbone.image_size = tuple(self.image_size)
        model_config.backbone.validate()
        out = self.out_dir or Path.cwd() / "stylizer_run"
        steps = {"nvs2": self.nvs2_steps, "nvs4": self.nvs4_steps, "stylize": self.stylize_steps}
        self.checkpoints_ = progressive_schedule(X, styles, out, config, model_config, steps)
        self.model_ = self.checkpoints_["stylize"].build_model().eval()
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint) -> "FeedForwardStylizer":
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        net = ckpt.build_model().eval()
        est = cls(n_views=int(ckpt.train_config.get("n_views", 4)), image_size=tuple(net.config.backbone.image_size),
                  seed=net.config.seed, model_config=ckpt.model_config)
        est.model_ = net
        est.checkpoints_ = {"loaded": ckpt}
        return est

    # -- inference --------------------------------------------------------
    def _inputs(self, X, style):
        check_is_fitted(self, "model_")
        size = tuple(self.model_.config.backbone.image_size)
        views = check_views(X, size)
        app = check_style(style, size) if style is not None else views[0]
        return torch.stack([_chw(v) for v in views])[None], _chw(app)[None]

    def transform(self, X, style=None):
        """Content views (N, H, W, 3) -> GaussianSet in the first view's camera frame.

        Without ``style`` the first content view is used (photoreal colors).
        """
        images, app = self._inputs(X, style)
        with torch.no_grad():
            return self.model_(images, app).index(0)

    def predict(self, X, cameras: Sequence[Camera], style=None) -> np.ndarray:
        """Render (T, H, W, 3) images at ``cameras`` (relative to the first content view)."""
        check_is_fitted(self, "model_")
        cams = check_cameras(cameras, tuple(self.model_.config.backbone.image_size))
        gs = self.transform(X, style)
        with torch.no_grad():
            return np.stack([render(gs, cam, BACKGROUND_COLOR).color.numpy() for cam in cams])

    def score(self, X: Sequence[SceneRecord], y=None) -> float:
        """Mean held-out novel-view PSNR on the content-as-style path."""
        check_is_fitted(self, "model_")
        return evaluate_nvs(self.model_, X, n_views=self.n_views)["psnr"]
