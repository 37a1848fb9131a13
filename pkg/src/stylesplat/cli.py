"""Command line entry point: dataset, train, stylize, interpolate, render, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import config as run_config
from .appearance import interpolate_styles
from .evaluation import (
    consistency_metrics, heldout_selection, histogram_distance, nvs_metrics, rgbuv_histogram, trajectory_flows,
    write_report,
)
from .gaussians import read_sgs, write_sgs
from .model import check_view_count
from .renderer import render
from .scene_data import (
    BACKGROUND_COLOR, Camera, DatasetError, SceneConfig, generate_dataset, generate_style_corpus, load_dataset,
    orbit_cameras, read_manifest, read_png, save_dataset,
)
from .training import (
    CheckpointCorruptError, CheckpointError, CheckpointVersionError, IncompatibleCheckpointError, finetune_style,
    load_checkpoint, pretrain_nvs, _with,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3
STAGES = ("nvs2", "nvs4", "stylize")

log = logging.getLogger("stylesplat")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> run_config.RunConfig:
    cfg = run_config.load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.model.seed = args.seed
    if getattr(args, "views", None) is not None:
        cfg.views = args.views
    return cfg


def _write_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


def _split(manifest_meta: dict, records) -> tuple:
    splits = manifest_meta.get("splits") or {}
    train_ids = set(splits.get("train", [r.scene_id for r in records]))
    held_ids = set(splits.get("heldout", []))
    return [r for r in records if r.scene_id in train_ids], [r for r in records if r.scene_id in held_ids]


def _load(data_dir):
    records, styles = load_dataset(data_dir)
    return records, styles, read_manifest(data_dir).get("meta", {})


def _content_dir(path, n_views: Optional[int]):
    """Frames (and optional cameras) from a directory laid out like a dataset scene."""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"content directory not found: {path}")
    pngs = sorted(path.glob("*.png"), key=lambda p: (len(p.stem), p.stem))
    if not pngs:
        raise DatasetError(f"no PNG images in {path}")
    frames = [read_png(p) for p in pngs]
    h, w = frames[0].shape[:2]
    cams = []
    for p in pngs:
        cam_path = p.with_suffix(".cam")
        cams.append(Camera.from_bytes(cam_path.read_bytes(), w, h) if cam_path.is_file() else None)
    if n_views is not None:
        if len(frames) > n_views:
            ctx, _ = heldout_selection(len(frames), n_views)
        else:
            ctx = list(range(len(frames)))
        frames, cams = [frames[k] for k in ctx], [cams[k] for k in ctx]
    check_view_count(len(frames))
    return frames, cams


def _model(checkpoint):
    ckpt = load_checkpoint(checkpoint)
    return ckpt, ckpt.build_model().eval()


def _check_size(net, image: np.ndarray, what: str) -> None:
    size = tuple(net.config.backbone.image_size)
    if image.shape[:2] != size:
        raise UsageError(f"{what} is {image.shape[0]}x{image.shape[1]}, model expects {size[0]}x{size[1]}")


def _tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)


def _targets(cfg, frames, cams, net, orbit: bool) -> list:
    """Input cameras (relative to the first view) when known, else a small orbit."""
    if not orbit and all(c is not None for c in cams):
        return [c.relative_to(cams[0]) for c in cams]
    fx, fy, cx, cy = net.config.resolved_intrinsics()
    h, w = frames[0].shape[:2]
    ref = Camera(fx, fy, cx, cy, np.eye(3), np.zeros(3), w, h)
    return orbit_cameras(ref, cfg.render.orbit_frames, cfg.render.orbit_degrees, cfg.render.orbit_pivot_depth)


def _render_all(gs, cameras) -> np.ndarray:
    with torch.no_grad():
        return np.stack([render(gs, cam, BACKGROUND_COLOR).color.numpy() for cam in cameras])


# ---------------------------------------------------------------------------
# commands


def cmd_dataset(args) -> int:
    cfg = _config(args)
    n_train = args.n_scenes if args.n_scenes is not None else cfg.data.n_train
    n_held = args.heldout if args.heldout is not None else cfg.data.n_heldout
    n_styles = args.n_styles if args.n_styles is not None else cfg.data.n_styles
    if n_train < 1 or n_held < 0 or n_styles < 1:
        raise UsageError("need at least one scene and one style")
    scene_cfg = SceneConfig(image_size=tuple(cfg.data.image_size), n_frames=cfg.data.n_frames,
                            patch_size=cfg.model.backbone.patch_size)
    scene_cfg.validate()
    records = generate_dataset(cfg.seed, n_train + n_held, scene_cfg)
    styles = generate_style_corpus(cfg.seed, n_styles, tuple(cfg.data.image_size))
    splits = {"train": [r.scene_id for r in records[:n_train]], "heldout": [r.scene_id for r in records[n_train:]]}
    out = Path(args.out)
    save_dataset(records, styles, out, meta={"seed": cfg.seed, "splits": splits})
    run_config.write_resolved(cfg, out)
    for i, rec in enumerate(records):
        split = "train" if i < n_train else "heldout"
        print(f"{rec.scene_id} split={split} frames={len(rec.views)} primitives={len(rec.primitives)}")
    print(f"wrote {n_train} train + {n_held} held-out scenes and {n_styles} styles to {out}")
    return EXIT_OK


def _stage_config(cfg, stage: str, out: Path):
    steps = {"nvs2": cfg.schedule.nvs2_steps, "nvs4": cfg.schedule.nvs4_steps, "stylize": cfg.schedule.stylize_steps}
    n_views = {"nvs2": 2, "nvs4": 4, "stylize": cfg.views}[stage]
    return _with(cfg.train, phase="stylize" if stage == "stylize" else "nvs", n_views=n_views, steps=steps[stage],
                 seed=cfg.seed, checkpoint_path=str(out / f"{stage}.ckpt"), log_path=str(out / f"{stage}.csv"))


def _prerequisite(stage: str, out: Path, init: Optional[str]) -> Optional[Path]:
    if stage == "nvs2":
        return Path(init) if init else None
    path = Path(init) if init else out / ("nvs2.ckpt" if stage == "nvs4" else "nvs4.ckpt")
    if not path.is_file():
        raise CheckpointError(f"stage {stage} needs a previous checkpoint; missing file: {path}")
    return path


def _run_stage(cfg, stage: str, out: Path, train, styles, init: Optional[str], resume: bool):
    tcfg = _stage_config(cfg, stage, out)
    own = Path(tcfg.checkpoint_path)
    previous = None
    if resume and own.is_file():
        previous = load_checkpoint(own)
        if previous.stage_step >= tcfg.steps:
            print(f"{stage}: already complete at step {previous.step}")
            return previous
        print(f"{stage}: resuming from stage step {previous.stage_step}")
    base = _prerequisite(stage, out, init)
    if stage == "stylize":
        ckpt = finetune_style(tcfg, train, styles, base, resume=previous)
    else:
        ckpt = pretrain_nvs(tcfg, train, init=base, model_config=cfg.model if base is None else None, resume=previous)
    print(f"{stage}: finished at step {ckpt.step} -> {own}")
    return ckpt


def cmd_train(args) -> int:
    cfg = _config(args)
    records, styles, meta = _load(args.data)
    train, _ = _split(meta, records)
    if not train:
        raise DatasetError("dataset has no training scenes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_config.write_resolved(cfg, out)
    torch.manual_seed(cfg.seed)
    stages = STAGES if args.stage == "all" else (args.stage,)
    for i, stage in enumerate(stages):
        _run_stage(cfg, stage, out, train, styles, args.init if i == 0 else None, args.resume)
    return EXIT_OK


def _stylize_inputs(args, cfg):
    ckpt, net = _model(args.checkpoint)
    frames, cams = _content_dir(args.content, cfg.views if args.views is not None else None)
    for k, f in enumerate(frames):
        _check_size(net, f, f"content view {k}")
    targets = _targets(cfg, frames, cams, net, args.orbit)
    images = torch.stack([_tensor(f) for f in frames])[None]
    return net, images, targets


def cmd_stylize(args) -> int:
    cfg = _config(args)
    net, images, targets = _stylize_inputs(args, cfg)
    style = read_png(args.style)
    _check_size(net, style, "style image")
    with torch.no_grad():
        t0 = time.perf_counter()
        gs = net(images, _tensor(style)[None]).index(0)
        elapsed = time.perf_counter() - t0
    renders = _render_all(gs, targets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(renders):
        _write_png(out / f"view_{k:02d}.png", img)
    np.save(out / "renders.npy", renders.astype(np.float32))
    write_sgs(out / "gaussians.sgs", gs)
    run_config.write_resolved(cfg, out)
    line = f"forward_time_s={elapsed:.4f} views={images.shape[1]} gaussians={gs.means.shape[0]}"
    (out / "timing.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    cfg = _config(args)
    net, images, targets = _stylize_inputs(args, cfg)
    style_a, style_b = read_png(args.style_a), read_png(args.style_b)
    _check_size(net, style_a, "style image A")
    _check_size(net, style_b, "style image B")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        tokens = net.encode_content(images)
        structure = net.structure(tokens, images)
        ta, tb = net.encode_style(_tensor(style_a)[None]), net.encode_style(_tensor(style_b)[None])
        sequence = []
        for i, t in enumerate(np.linspace(0.0, 1.0, args.steps)):
            t = float(t)
            blended = interpolate_styles([ta, tb], [1.0 - t, t])
            gs = net.assemble(structure, net.colors_from_style_tokens(tokens, blended, images)).index(0)
            renders = _render_all(gs, targets)
            for k, img in enumerate(renders):
                _write_png(out / f"t{i:02d}_view_{k:02d}.png", img)
            sequence.append(renders)
    np.save(out / "frames.npy", np.stack(sequence).astype(np.float32))
    run_config.write_resolved(cfg, out)
    print(f"wrote {args.steps} interpolation steps x {len(targets)} views to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config(args)
    gs = read_sgs(args.gaussians)
    fx, fy, cx, cy = cfg.model.resolved_intrinsics()
    h, w = cfg.data.image_size
    ref = Camera(fx, fy, cx, cy, np.eye(3), np.zeros(3), w, h)
    cams = orbit_cameras(ref, cfg.render.orbit_frames, cfg.render.orbit_degrees, cfg.render.orbit_pivot_depth)
    out = Path(args.out)
    for k, img in enumerate(_render_all(gs, cams)):
        _write_png(out / f"view_{k:02d}.png", img)
    print(f"rendered {len(cams)} views of {gs.means.shape[0]} Gaussians to {out}")
    return EXIT_OK


def evaluate_scene(net, rec, style, n_views: int, backbone=None) -> dict:
    """NVS metrics on content-as-style renders of held-out targets; consistency and
    histogram metrics on stylized renders of the full trajectory."""
    ctx, targets = heldout_selection(len(rec.views), n_views)
    images = torch.stack([_tensor(rec.views[k].image) for k in ctx])[None]
    ref = rec.views[ctx[0]].camera
    cams = [v.camera.relative_to(ref) for v in rec.views]
    with torch.no_grad():
        tokens = net.encode_content(images)
        structure = net.structure(tokens, images)
        photo = net.assemble(structure, net.appearance(tokens, images[:, 0], images)).index(0)
        styled = net.assemble(structure, net.appearance(tokens, _tensor(style.image)[None], images)).index(0)
    photo_renders = _render_all(photo, [cams[k] for k in targets])
    nvs = [nvs_metrics(img, rec.views[k].image, backbone) for img, k in zip(photo_renders, targets)]
    frames = _render_all(styled, cams)
    flows, valids = trajectory_flows(rec.views)
    cons = consistency_metrics(frames, flows, valids, [v.depth for v in rec.views], backbone=backbone)
    hs = rgbuv_histogram(style.image)
    hist = float(np.mean([histogram_distance(rgbuv_histogram(f), hs) for f in frames]))
    return {
        "scene_id": rec.scene_id, "style_id": style.id,
        "short_rmse": cons.short_rmse, "short_perceptual": cons.short_perceptual,
        "long_rmse": cons.long_rmse, "long_perceptual": cons.long_perceptual,
        "psnr": float(np.mean([m["psnr"] for m in nvs])), "ssim": float(np.mean([m["ssim"] for m in nvs])),
        "perceptual": float(np.mean([m["perceptual"] for m in nvs])), "hist_distance": hist,
    }


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt, net = _model(args.checkpoint)
    records, styles, meta = _load(args.data)
    train, held = _split(meta, records)
    scenes = held if held else records
    if args.scenes:
        wanted = set(args.scenes)
        scenes = [r for r in records if r.scene_id in wanted]
    if not scenes:
        raise DatasetError("no scenes to evaluate")
    seen = sorted({r.scene_id for r in scenes} & set(ckpt.train_scenes))
    if seen and not args.allow_train_split:
        raise UsageError(f"checkpoint was trained on {', '.join(seen)}; pass --allow-train-split to evaluate anyway")
    rows = [evaluate_scene(net, rec, style, cfg.views) for rec in scenes for style in styles]
    out = Path(args.out)
    write_report(rows, out / "metrics.json", out / "metrics.csv")
    run_config.write_resolved(cfg, out)
    for row in rows:
        print(f"{row['scene_id']} {row['style_id']} psnr={row['psnr']:.2f} short_rmse={row['short_rmse']:.4f} "
              f"long_rmse={row['long_rmse']:.4f} hist={row['hist_distance']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="stylesplat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--n-scenes", type=int, help="number of training scenes")
    p.add_argument("--heldout", type=int, help="number of held-out scenes")
    p.add_argument("--n-styles", type=int)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="run one curriculum stage or all of them")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--stage", choices=(*STAGES, "all"), default="all")
    p.add_argument("--init", help="checkpoint to start the (first) stage from")
    p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint in --out")
    p.add_argument("--views", type=int, help="content views for the stylization stage")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("stylize", cmd_stylize, "stylize content views with one style image"),
                              ("interpolate", cmd_interpolate, "blend two styles")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--content", required=True, help="directory of content PNGs (+ optional .cam files)")
        p.add_argument("--views", type=int, help="use this many evenly spaced content views")
        p.add_argument("--orbit", action="store_true", help="render an orbit instead of the input cameras")
        if name == "stylize":
            p.add_argument("--style", required=True)
        else:
            p.add_argument("--style-a", required=True)
            p.add_argument("--style-b", required=True)
            p.add_argument("--steps", type=int, default=5, help="number of blend weights, endpoints included")
        p.set_defaults(func=func)

    p = sub.add_parser("render", parents=[common], help="re-render an exported SGS1 Gaussian file")
    p.add_argument("--gaussians", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenes", nargs="*", help="scene ids (default: the held-out split)")
    p.add_argument("--views", type=int)
    p.add_argument("--allow-train-split", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, run_config.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointVersionError, CheckpointCorruptError, IncompatibleCheckpointError) as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PermissionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
