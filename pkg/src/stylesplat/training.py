"""Two-stage training curriculum, optimizer groups and checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .losses import PERCEPTUAL_WEIGHT, MSE_WEIGHT, STYLE_WEIGHT, LossReport, PerceptualBackbone, default_backbone, total_loss
from .model import (ATTRIBUTE_HEAD, CENTER_HEAD, COLOR_HEAD, CONTENT_ENCODER, STRUCTURE_DECODER, STRUCTURE_MODULES,
                    STYLE_ENCODER, STYLIZATION_DECODER, ModelConfig, StylizationNet, check_view_count)
from .renderer import render
from .scene_data import BACKGROUND_COLOR, SceneRecord, StyleImage

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SSCKPT"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("step", "photometric", "style", "content", "identity", "total")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    def __init__(self, key: str, detail: str):
        super().__init__(f"checkpoint incompatible at '{key}': {detail}")
        self.key = key


@dataclass
class TrainConfig:
    phase: str = "nvs"
    n_views: int = 2
    steps: int = 2000
    batch_size: int = 2
    targets_per_scene: int = 1
    lr_high: float = 1e-3  # heads and stylization decoder; full-scale runs use 2e-4
    lr_low: float = 1e-4  # encoders and structure decoder; full-scale runs use 2e-5
    weight_decay: float = 0.05
    warmup_steps: int = 50
    min_lr_ratio: float = 0.1
    style_weight: float = STYLE_WEIGHT
    mse_weight: float = MSE_WEIGHT
    perceptual_weight: float = PERCEPTUAL_WEIGHT
    identity_loss: bool = True
    max_span: int = 4
    seed: int = 0
    checkpoint_path: Optional[str] = None
    log_path: Optional[str] = None
    checkpoint_every: int = 200

    def validate(self) -> None:
        if self.phase not in ("nvs", "stylize"):
            raise ValueError(f"phase must be 'nvs' or 'stylize', got {self.phase!r}")
        check_view_count(self.n_views)
        if self.steps < 0 or self.batch_size < 1 or self.targets_per_scene < 1:
            raise ValueError("steps, batch_size and targets_per_scene must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class Checkpoint:
    params: dict
    model_config: dict
    train_config: dict
    step: int
    stage_step: int = 0
    optimizer_state: Optional[dict] = None
    scheduler_state: Optional[dict] = None
    rng_state: Optional[dict] = None
    metrics: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
    log: list = field(default_factory=list)
    path: Optional[str] = None
    train_scenes: list = field(default_factory=list)  # every scene id seen by any stage so far

    def build_model(self) -> StylizationNet:
        net = StylizationNet(ModelConfig.from_dict(self.model_config))
        load_into(net, self)
        return net


# ---------------------------------------------------------------------------
# checkpoint IO


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Binary file (magic, version, length, sha256, payload) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "params": ckpt.params,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "stage_step": ckpt.stage_step,
        "optimizer_state": ckpt.optimizer_state,
        "scheduler_state": ckpt.scheduler_state,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
        "log": ckpt.log,
        "train_scenes": ckpt.train_scenes,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(body)) + hashlib.sha256(body).digest()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "step": ckpt.step,
        "stage_step": ckpt.stage_step,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "metrics": ckpt.metrics,
        "train_scenes": ckpt.train_scenes,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=str))
    ckpt.path = str(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    head = len(CHECKPOINT_MAGIC) + 12 + 32
    if len(data) < head or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    version, length = struct.unpack("<IQ", data[len(CHECKPOINT_MAGIC): len(CHECKPOINT_MAGIC) + 12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, supported {CHECKPOINT_VERSION}")
    digest = data[len(CHECKPOINT_MAGIC) + 12: head]
    body = data[head:]
    if len(body) != length or hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError(f"{path}: payload is truncated or corrupt")
    payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
    return Checkpoint(version=version, path=str(path), **payload)


def model_state(net: StylizationNet) -> dict:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def load_into(net: StylizationNet, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into ``net``; the first mismatched key is reported."""
    expected = net.state_dict()
    exp_keys, got_keys = list(expected), list(ckpt.params)
    for a, b in zip(exp_keys, got_keys):
        if a != b:
            raise IncompatibleCheckpointError(a, f"expected key '{a}', checkpoint has '{b}'")
        if tuple(expected[a].shape) != tuple(ckpt.params[b].shape):
            raise IncompatibleCheckpointError(
                a, f"shape {tuple(ckpt.params[b].shape)} does not match model {tuple(expected[a].shape)}")
    if len(exp_keys) != len(got_keys):
        longer = exp_keys if len(exp_keys) > len(got_keys) else got_keys
        key = longer[min(len(exp_keys), len(got_keys))]
        raise IncompatibleCheckpointError(key, "parameter count differs")
    net.load_state_dict(ckpt.params)


def parameter_hash(net: StylizationNet, modules: Sequence[str] = STRUCTURE_MODULES) -> str:
    """SHA-256 over the raw bytes of every parameter in ``modules``."""
    h = hashlib.sha256()
    for name in modules:
        for pname, p in sorted(getattr(net, name).named_parameters()):
            h.update(f"{name}.{pname}".encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def params_hash_from_state(params: dict, modules: Sequence[str] = STRUCTURE_MODULES) -> str:
    h = hashlib.sha256()
    for name in modules:
        prefix = name + "."
        items = sorted((k[len(prefix):], v) for k, v in params.items() if k.startswith(prefix))
        for pname, v in items:
            h.update(f"{name}.{pname}".encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# optimizer groups


def optimizer_groups(net: StylizationNet, config: TrainConfig):
    """Return (param_groups, frozen_module_names) for the configured phase."""
    if config.phase == "nvs":
        high = (STYLIZATION_DECODER, COLOR_HEAD, CENTER_HEAD, ATTRIBUTE_HEAD)
        low = (CONTENT_ENCODER, STYLE_ENCODER, STRUCTURE_DECODER)
        frozen: tuple = ()
    else:
        high = (STYLIZATION_DECODER, COLOR_HEAD)
        low = (STYLE_ENCODER,)
        frozen = STRUCTURE_MODULES
    groups_by_name = net.parameter_groups()
    for name in frozen:
        for p in groups_by_name[name]:
            p.requires_grad_(False)
    for name in high + low:
        for p in groups_by_name[name]:
            p.requires_grad_(True)
    groups = [
        {"params": [p for n in high for p in groups_by_name[n]], "lr": config.lr_high, "name": "high", "modules": high},
        {"params": [p for n in low for p in groups_by_name[n]], "lr": config.lr_low, "name": "low", "modules": low},
    ]
    return groups, frozen


def _lr_lambda(config: TrainConfig) -> Callable[[int], float]:
    def fn(step: int) -> float:
        warm = min(1.0, (step + 1) / max(1, config.warmup_steps))
        progress = min(1.0, step / max(1, config.steps))
        cos = config.min_lr_ratio + (1 - config.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress))
        return warm * cos

    return fn


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: torch.Tensor  # (B, N, 3, H, W)
    targets: torch.Tensor  # (B, T, H, W, 3)
    cameras: list  # B lists of T cameras relative to the first context view
    appearance_index: list  # per scene, index of the content view fed as appearance
    scene_ids: list
    context_frames: list
    target_frames: list


def view_selection(n_frames: int, n_views: int, start: int, span: int):
    """Evenly spaced context frames over [start, start + span]; the rest are targets."""
    ctx = sorted({int(round(x)) for x in np.linspace(start, start + span, n_views)})
    if len(ctx) != n_views or start + span >= n_frames:
        raise ValueError("span too short for the requested number of views")
    targets = [k for k in range(start, start + span + 1) if k not in ctx]
    return ctx, targets


def span_range(n_views: int, max_span: int, n_frames: int) -> tuple:
    lo = n_views  # leaves at least one target between contexts
    hi = min(max(lo, max_span + 2 * (n_views - 2)), n_frames - 1)
    return lo, hi


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))


def make_batch(records: Sequence[SceneRecord], scene_idx: Sequence[int], n_views: int, rng: np.random.Generator,
               targets_per_scene: int = 1, max_span: int = 4) -> Batch:
    images, targets, cameras, app, ids, ctxs, tgts = [], [], [], [], [], [], []
    for si in scene_idx:
        rec = records[si]
        n_frames = len(rec.views)
        lo, hi = span_range(n_views, max_span, n_frames)
        span = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, n_frames - span))
        ctx, candidates = view_selection(n_frames, n_views, start, span)
        chosen = [int(c) for c in rng.choice(candidates, size=targets_per_scene, replace=len(candidates) < targets_per_scene)]
        ref = rec.views[ctx[0]].camera
        images.append(torch.stack([_to_tensor(rec.views[k].image).permute(2, 0, 1) for k in ctx]))
        targets.append(torch.stack([_to_tensor(rec.views[k].image) for k in chosen]))
        cameras.append([rec.views[k].camera.relative_to(ref) for k in chosen])
        app.append(int(rng.integers(0, n_views)))
        ids.append(rec.scene_id)
        ctxs.append(ctx)
        tgts.append(chosen)
    return Batch(torch.stack(images), torch.stack(targets), cameras, app, ids, ctxs, tgts)


def render_views(gaussians, cameras: list) -> torch.Tensor:
    """Render batched Gaussians (B, M, .) into per-scene camera lists -> (B, T, H, W, 3)."""
    out = []
    for b, cams in enumerate(cameras):
        gs = gaussians.index(b)
        out.append(torch.stack([render(gs, cam, BACKGROUND_COLOR).color for cam in cams]))
    return torch.stack(out)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepResult:
    report: LossReport
    lr: float


class Trainer:
    """One curriculum stage over a fixed dataset."""

    def __init__(self, net: StylizationNet, config: TrainConfig, records: Sequence[SceneRecord],
                 styles: Optional[Sequence[StyleImage]] = None, backbone: Optional[PerceptualBackbone] = None,
                 step_offset: int = 0, prior_scenes: Sequence[str] = ()):
        config.validate()
        if config.phase == "stylize" and not styles:
            raise ValueError("stylization fine-tuning needs style images")
        min_frames = config.n_views + 1
        for rec in records:
            if len(rec.views) < min_frames:
                raise ValueError(f"scene {rec.scene_id} has {len(rec.views)} frames, need >= {min_frames}")
        self.net = net
        self.config = config
        self.records = list(records)
        self.styles = [_to_tensor(s.image).permute(2, 0, 1) for s in styles] if styles else []
        self.backbone = backbone or default_backbone()
        groups, self.frozen = optimizer_groups(net, config)
        self.optimizer = torch.optim.AdamW(groups, weight_decay=config.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, _lr_lambda(config))
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A1]))
        self.step_offset = step_offset
        self.train_scenes = sorted(set(prior_scenes) | {r.scene_id for r in self.records})
        self.stage_step = 0
        self.log: list = []

    # -- state ---------------------------------------------------------------
    def checkpoint(self, metrics: Optional[dict] = None) -> Checkpoint:
        return Checkpoint(
            params=model_state(self.net),
            model_config=self.net.config.to_dict(),
            train_config=asdict(self.config),
            step=self.step_offset + self.stage_step,
            stage_step=self.stage_step,
            optimizer_state=copy.deepcopy(self.optimizer.state_dict()),
            scheduler_state=copy.deepcopy(self.scheduler.state_dict()),
            rng_state=copy.deepcopy(self.rng.bit_generator.state),
            metrics=dict(metrics or {}),
            log=list(self.log),
            train_scenes=list(self.train_scenes),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume mid-stage from a checkpoint written by this stage."""
        load_into(self.net, ckpt)
        if ckpt.optimizer_state is not None:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.scheduler_state is not None:
            self.scheduler.load_state_dict(ckpt.scheduler_state)
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.stage_step = ckpt.stage_step
        self.step_offset = ckpt.step - ckpt.stage_step
        self.log = list(ckpt.log)
        self.train_scenes = sorted(set(self.train_scenes) | set(ckpt.train_scenes))

    # -- steps ---------------------------------------------------------------
    def _sample(self) -> Batch:
        idx = self.rng.integers(0, len(self.records), size=self.config.batch_size)
        return make_batch(self.records, idx, self.config.n_views, self.rng, self.config.targets_per_scene,
                          self.config.max_span)

    def loss(self, batch: Batch) -> LossReport:
        cfg = self.config
        net = self.net
        images = batch.images
        b = images.shape[0]
        content_app = torch.stack([images[i, batch.appearance_index[i]] for i in range(b)])
        weights = dict(style_weight=cfg.style_weight, mse_weight=cfg.mse_weight, perceptual_weight=cfg.perceptual_weight)
        targets = batch.targets
        if cfg.phase == "nvs":
            gaussians = net(images, content_app)
            renders = render_views(gaussians, batch.cameras)
            return total_loss("nvs", renders_identity=renders, targets=targets, backbone=self.backbone, **weights)

        style_idx = self.rng.integers(0, len(self.styles), size=b)
        style_imgs = torch.stack([self.styles[i] for i in style_idx])
        with torch.no_grad():
            tokens = net.encode_content(images)
            structure = net.structure(tokens, images)
        app = torch.cat([style_imgs, content_app]) if cfg.identity_loss else style_imgs
        k = app.shape[0] // b
        raw = net.appearance(tokens.repeat(k, 1, 1, 1), app, images.repeat(k, 1, 1, 1, 1))
        g_style = net.assemble(structure, raw[:b])
        r_style = render_views(g_style, batch.cameras)
        t = targets.shape[1]
        style_per_view = style_imgs[:, None].expand(b, t, *style_imgs.shape[1:]).reshape(b * t, *style_imgs.shape[1:])
        r_ident = None
        if cfg.identity_loss:
            g_content = net.assemble(structure, raw[b:])
            r_ident = render_views(g_content, batch.cameras)
        return total_loss("stylize", renders_stylized=r_style, renders_identity=r_ident, targets=targets,
                          style_image=style_per_view, backbone=self.backbone, use_identity=cfg.identity_loss,
                          **weights)

    def step(self) -> StepResult:
        self.net.train()
        batch = self._sample()
        report = self.loss(batch)
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.stage_step += 1
        row = {"step": self.step_offset + self.stage_step, **report.values()}
        self.log.append(row)
        return StepResult(report, self.optimizer.param_groups[0]["lr"])

    def run(self, steps: Optional[int] = None, callback: Optional[Callable[["Trainer"], None]] = None) -> Checkpoint:
        remaining = (steps if steps is not None else self.config.steps) - self.stage_step
        every = self.config.checkpoint_every
        for _ in range(max(0, remaining)):
            res = self.step()
            if self.stage_step % 100 == 0 or self.stage_step == 1:
                log.info("%s step %d total %.5f", self.config.phase, self.stage_step, res.report.values()["total"])
            if every and self.config.checkpoint_path and self.stage_step % every == 0:
                save_checkpoint(self.checkpoint(), self.config.checkpoint_path)
            if callback is not None:
                callback(self)
        ckpt = self.checkpoint()
        if self.config.checkpoint_path:
            save_checkpoint(ckpt, self.config.checkpoint_path)
        if self.config.log_path:
            write_log(self.log, self.config.log_path)
        return ckpt


def write_log(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def smoothed(values: Sequence[float], step: int, window: int = 100) -> float:
    """Mean of the ``window`` values ending at 1-based ``step``."""
    lo = max(0, step - window)
    chunk = list(values[lo:step])
    if not chunk:
        raise ValueError("empty smoothing window")
    return float(np.mean(chunk))


# ---------------------------------------------------------------------------
# curriculum entry points


def _model_from(init, model_config: Optional[ModelConfig]) -> StylizationNet:
    if isinstance(init, StylizationNet):
        return init
    if isinstance(init, Checkpoint):
        return init.build_model()
    return StylizationNet(model_config or ModelConfig())


def pretrain_nvs(config: TrainConfig, dataset: Sequence[SceneRecord], init=None,
                 model_config: Optional[ModelConfig] = None, resume=None, step_offset: Optional[int] = None,
                 backbone: Optional[PerceptualBackbone] = None) -> Checkpoint:
    """Novel-view pre-training with the photometric loss on content-as-style renders."""
    config = _with(config, phase="nvs")
    if isinstance(init, (str, Path)):
        init = load_checkpoint(init)
    net = _model_from(init, model_config)
    prior = init if isinstance(init, Checkpoint) else None
    offset = step_offset if step_offset is not None else (prior.step if prior else 0)
    trainer = Trainer(net, config, dataset, backbone=backbone, step_offset=offset,
                      prior_scenes=prior.train_scenes if prior else ())
    if resume is not None:
        trainer.restore(load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume)
    ckpt = trainer.run()
    ckpt.model = net  # type: ignore[attr-defined]
    return ckpt


def finetune_style(config: TrainConfig, dataset: Sequence[SceneRecord], styles: Sequence[StyleImage], nvs_checkpoint,
                   resume=None, backbone: Optional[PerceptualBackbone] = None) -> Checkpoint:
    """Stylization fine-tuning with the structure branch and content encoder frozen."""
    config = _with(config, phase="stylize")
    if nvs_checkpoint is None:
        raise CheckpointError("stylization fine-tuning requires an NVS checkpoint")
    base = nvs_checkpoint if isinstance(nvs_checkpoint, Checkpoint) else load_checkpoint(nvs_checkpoint)
    net = base.build_model()
    trainer = Trainer(net, config, dataset, styles=styles, backbone=backbone, step_offset=base.step,
                      prior_scenes=base.train_scenes)
    if resume is not None:
        trainer.restore(load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume)
    ckpt = trainer.run()
    ckpt.model = net  # type: ignore[attr-defined]
    return ckpt


def _with(config: TrainConfig, **changes) -> TrainConfig:
    data = asdict(config)
    data.update(changes)
    return TrainConfig(**data)


def progressive_schedule(dataset: Sequence[SceneRecord], styles: Sequence[StyleImage], out_dir,
                         base: Optional[TrainConfig] = None, model_config: Optional[ModelConfig] = None,
                         steps: Optional[dict] = None, backbone: Optional[PerceptualBackbone] = None) -> dict:
    """2-view NVS -> 4-view NVS (initialized from it) -> 4-view stylization.

    Returns the three checkpoints keyed ``nvs2``, ``nvs4``, ``stylize``.
    """
    base = base or TrainConfig()
    steps = steps or {}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c1 = _with(base, phase="nvs", n_views=2, steps=steps.get("nvs2", base.steps),
               checkpoint_path=str(out / "nvs2.ckpt"), log_path=str(out / "nvs2.csv"))
    k1 = pretrain_nvs(c1, dataset, model_config=model_config, backbone=backbone)
    c2 = _with(base, phase="nvs", n_views=4, steps=steps.get("nvs4", base.steps),
               checkpoint_path=str(out / "nvs4.ckpt"), log_path=str(out / "nvs4.csv"))
    k2 = pretrain_nvs(c2, dataset, init=k1, backbone=backbone)
    c3 = _with(base, phase="stylize", n_views=4, steps=steps.get("stylize", base.steps),
               checkpoint_path=str(out / "stylize.ckpt"), log_path=str(out / "stylize.csv"))
    k3 = finetune_style(c3, dataset, styles, k2, backbone=backbone)
    return {"nvs2": k1, "nvs4": k2, "stylize": k3}
