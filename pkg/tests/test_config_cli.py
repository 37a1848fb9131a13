import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from stylesplat import cli
from stylesplat.config import ConfigError, RunConfig, from_dict, load_config, write_resolved
from stylesplat.renderer import render
from stylesplat.scene_data import BACKGROUND_COLOR, Camera, SceneConfig, read_png
from stylesplat.training import Trainer, load_checkpoint, read_log

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "data": {"n_train": 2, "n_heldout": 1, "n_styles": 2, "image_size": [16, 16]},
    "model": {
        "backbone": {"patch_size": 4, "width": 32, "depth": 2, "heads": 2},
        "structure": {"width": 32, "depth": 2, "heads": 2, "taps": [1, 2], "head_features": 8},
        "appearance": {"depth": 2, "heads": 2, "head_features": 8},
    },
    "train": {"batch_size": 1, "warmup_steps": 1, "checkpoint_every": 1},
    "schedule": {"nvs2_steps": 2, "nvs4_steps": 2, "stylize_steps": 2},
    "render": {"orbit_frames": 3},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.yaml"
    config.write_text(yaml.safe_dump(TINY))
    data = root / "data"
    assert run("dataset", "--config", config, "--out", data) == 0
    runs = root / "run"
    assert run("train", "--config", config, "--data", data, "--out", runs) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    held = manifest["meta"]["splits"]["heldout"][0]
    content = root / "content"
    content.mkdir()
    for k in (0, 4):  # two context frames with their cameras
        for ext in ("png", "cam"):
            shutil.copy(data / "scenes" / held / f"frame_{k}.{ext}", content / f"frame_{k}.{ext}")
    return {"root": root, "config": config, "data": data, "run": runs, "held": held, "content": content,
            "styles": sorted((data / "styles").glob("*.png"))}


# ---------------------------------------------------------------------------
# config


def test_example_config_matches_defaults():
    assert load_config(ROOT / "configs" / "example.yaml").to_dict() == RunConfig().to_dict()


@pytest.mark.parametrize("data", [{"bogus": 1}, {"train": {"lr": 1.0}}, {"model": {"backbone": {"size": 3}}},
                                  {"data": {"frames": 12}}])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict(data)


def test_image_size_conflict_and_sync():
    cfg = from_dict({"data": {"image_size": [32, 32]}})
    assert cfg.model.backbone.image_size == (32, 32)
    with pytest.raises(ConfigError):
        from_dict({"data": {"image_size": [32, 32]}, "model": {"backbone": {"image_size": [64, 64]}}})
    with pytest.raises(ValueError):
        from_dict({"data": {"image_size": [30, 30]}})


def test_resolved_config_reloads_identically(tmp_path):
    cfg = from_dict(TINY)
    path = write_resolved(cfg, tmp_path)
    assert load_config(path).to_dict() == cfg.to_dict()


# ---------------------------------------------------------------------------
# dataset


def test_dataset_defaults(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "SceneConfig", _small_scene_config)
    assert run("dataset", "--out", tmp_path / "d", "--n-styles", 8) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(manifest["meta"]["splits"]["train"]) == 8 and len(manifest["meta"]["splits"]["heldout"]) == 2
    assert len(list((tmp_path / "d" / "styles").glob("*.png"))) == 8
    lines = [l for l in capsys.readouterr().out.splitlines() if "split=" in l]
    assert len(lines) == 10
    assert (tmp_path / "d" / "resolved_config.yaml").is_file()


def _small_scene_config(**kw):
    # defaults are 64x64; a smaller raster keeps this test fast without changing counts
    kw.update(image_size=(16, 16), patch_size=8)
    return SceneConfig(**kw)


def test_dataset_rerun_identical_checksums(tiny, tmp_path):
    assert run("dataset", "--config", tiny["config"], "--out", tmp_path / "again") == 0
    a = json.loads((tiny["data"] / "manifest.json").read_text())["checksums"]
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())["checksums"]
    assert a == b


def test_dataset_zero_scenes_is_usage_error(tmp_path, capsys):
    assert run("dataset", "--n-scenes", 0, "--out", tmp_path / "d") == cli.EXIT_USAGE
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_all_writes_three_checkpoints(tiny):
    steps = []
    for stage in ("nvs2", "nvs4", "stylize"):
        ckpt = load_checkpoint(tiny["run"] / f"{stage}.ckpt")
        steps.append(ckpt.step)
        rows = read_log(tiny["run"] / f"{stage}.csv")
        assert len(rows) == 2
    assert steps == [2, 4, 6]
    assert (tiny["run"] / "resolved_config.yaml").is_file()
    assert tiny["held"] not in load_checkpoint(tiny["run"] / "stylize.ckpt").train_scenes


def test_train_stylize_without_prerequisite(tiny, tmp_path, capsys):
    code = run("train", "--config", tiny["config"], "--data", tiny["data"], "--out", tmp_path, "--stage", "stylize")
    assert code == cli.EXIT_DATA
    assert "nvs4.ckpt" in capsys.readouterr().err


class Interrupted(Exception):
    pass


def test_train_resume_continues_interrupted_stage(tiny, tmp_path, monkeypatch):
    config = tmp_path / "c.yaml"
    config.write_text(yaml.safe_dump(dict(TINY, schedule={"nvs2_steps": 3, "nvs4_steps": 2, "stylize_steps": 2})))
    args = ("train", "--config", config, "--data", tiny["data"], "--stage", "nvs2")
    assert run(*args, "--out", tmp_path / "full") == 0

    original = Trainer.step

    def crash_after_two(self):
        if self.stage_step == 2:
            raise Interrupted()
        return original(self)

    monkeypatch.setattr(Trainer, "step", crash_after_two)
    with pytest.raises(Interrupted):
        run(*args, "--out", tmp_path / "part")
    assert load_checkpoint(tmp_path / "part" / "nvs2.ckpt").stage_step == 2  # written every step
    monkeypatch.setattr(Trainer, "step", original)
    assert run(*args, "--out", tmp_path / "part", "--resume") == 0
    a, b = load_checkpoint(tmp_path / "full" / "nvs2.ckpt"), load_checkpoint(tmp_path / "part" / "nvs2.ckpt")
    assert a.step == b.step == 3
    assert read_log(tmp_path / "full" / "nvs2.csv") == read_log(tmp_path / "part" / "nvs2.csv")
    for k, v in a.params.items():
        assert torch.equal(v, b.params[k]), k


def test_train_resume_skips_finished_stage(tiny, capsys):
    assert run("train", "--config", tiny["config"], "--data", tiny["data"], "--out", tiny["run"], "--stage", "nvs2",
               "--resume") == 0
    assert "already complete" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# stylize / interpolate / render


def stylize(tiny, out, style, *extra):
    return run("stylize", "--config", tiny["config"], "--checkpoint", tiny["run"] / "stylize.ckpt",
               "--content", tiny["content"], "--style", style, "--out", out, *extra)


def test_stylize_outputs_and_determinism(tiny, tmp_path):
    assert stylize(tiny, tmp_path / "a", tiny["styles"][0]) == 0
    assert stylize(tiny, tmp_path / "b", tiny["styles"][0]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert {"view_00.png", "view_01.png", "gaussians.sgs", "timing.txt", "renders.npy",
            "resolved_config.yaml"} <= set(names)
    for name in names:
        if name != "timing.txt":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    timing = (tmp_path / "a" / "timing.txt").read_text()
    assert timing.startswith("forward_time_s=") and "views=2" in timing and "gaussians=512" in timing


def test_stylize_orbit_cameras(tiny, tmp_path):
    assert stylize(tiny, tmp_path, tiny["styles"][0], "--orbit") == 0
    assert np.load(tmp_path / "renders.npy").shape == (3, 16, 16, 3)


def test_content_as_style_reproduces_photoreal(tiny, tmp_path):
    view0 = tiny["content"] / "frame_0.png"
    assert stylize(tiny, tmp_path, view0) == 0
    net = load_checkpoint(tiny["run"] / "stylize.ckpt").build_model().eval()
    frames = [read_png(tiny["content"] / f"frame_{k}.png") for k in (0, 4)]
    cams = [Camera.from_bytes((tiny["content"] / f"frame_{k}.cam").read_bytes(), 16, 16) for k in (0, 4)]
    images = torch.stack([torch.from_numpy(f).permute(2, 0, 1) for f in frames])[None]
    with torch.no_grad():
        gs = net(images, images[:, 0]).index(0)
        photo = np.stack([render(gs, c.relative_to(cams[0]), BACKGROUND_COLOR).color.numpy() for c in cams])
    np.testing.assert_array_equal(np.load(tmp_path / "renders.npy"), photo.astype(np.float32))


def test_stylize_view_count_and_size_errors(tiny, tmp_path):
    one = tmp_path / "one"
    one.mkdir()
    shutil.copy(tiny["content"] / "frame_0.png", one / "frame_0.png")
    code = run("stylize", "--config", tiny["config"], "--checkpoint", tiny["run"] / "stylize.ckpt", "--content", one,
               "--style", tiny["styles"][0], "--out", tmp_path / "o")
    assert code == cli.EXIT_USAGE
    Image.new("RGB", (32, 32)).save(tmp_path / "big.png")
    assert stylize(tiny, tmp_path / "o2", tmp_path / "big.png") == cli.EXIT_USAGE


def test_stylize_eight_views_on_four_view_model(tiny, tmp_path):
    scene = tiny["data"] / "scenes" / tiny["held"]
    code = run("stylize", "--config", tiny["config"], "--checkpoint", tiny["run"] / "stylize.ckpt",
               "--content", scene, "--views", 8, "--style", tiny["styles"][1], "--out", tmp_path)
    assert code == 0
    assert "views=8" in (tmp_path / "timing.txt").read_text()


def test_bad_checkpoint_exit_codes(tiny, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nonsense")
    assert run("stylize", "--checkpoint", bad, "--content", tiny["content"], "--style", tiny["styles"][0],
               "--out", tmp_path / "o") == cli.EXIT_CHECKPOINT
    assert run("stylize", "--checkpoint", tmp_path / "none.ckpt", "--content", tiny["content"], "--style",
               tiny["styles"][0], "--out", tmp_path / "o") == cli.EXIT_DATA
    assert run("stylize", "--out", tmp_path) == cli.EXIT_USAGE


@pytest.mark.parametrize("k", [2, 5])
def test_interpolate_endpoints_match_stylize(tiny, tmp_path, k):
    a, b = tiny["styles"]
    code = run("interpolate", "--config", tiny["config"], "--checkpoint", tiny["run"] / "stylize.ckpt",
               "--content", tiny["content"], "--style-a", a, "--style-b", b, "--steps", k, "--out", tmp_path / "i")
    assert code == 0
    frames = np.load(tmp_path / "i" / "frames.npy")
    assert frames.shape == (k, 2, 16, 16, 3)
    assert len(list((tmp_path / "i").glob("t*_view_*.png"))) == 2 * k
    for idx, style in ((0, a), (k - 1, b)):
        assert stylize(tiny, tmp_path / f"s{idx}", style) == 0
        assert np.array_equal(frames[idx], np.load(tmp_path / f"s{idx}" / "renders.npy"))
    if k == 5:
        assert not np.array_equal(frames[2], frames[0]) and not np.array_equal(frames[2], frames[4])


def test_interpolate_needs_two_steps(tiny, tmp_path):
    a, b = tiny["styles"]
    assert run("interpolate", "--checkpoint", tiny["run"] / "stylize.ckpt", "--content", tiny["content"],
               "--style-a", a, "--style-b", b, "--steps", 1, "--out", tmp_path) == cli.EXIT_USAGE


def test_render_reloads_exported_gaussians(tiny, tmp_path):
    assert stylize(tiny, tmp_path / "s", tiny["styles"][0]) == 0
    assert run("render", "--config", tiny["config"], "--gaussians", tmp_path / "s" / "gaussians.sgs",
               "--out", tmp_path / "r") == 0
    assert len(list((tmp_path / "r").glob("view_*.png"))) == 3


# ---------------------------------------------------------------------------
# eval


def test_eval_heldout_report(tiny, tmp_path):
    args = ("eval", "--config", tiny["config"], "--checkpoint", tiny["run"] / "stylize.ckpt", "--data", tiny["data"])
    assert run(*args, "--out", tmp_path / "a") == 0
    rows = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert {(r["scene_id"], r["style_id"]) for r in rows} == {(tiny["held"], p.stem) for p in tiny["styles"]}
    assert len(rows) == 2
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("scene_id,style_id,short_rmse")
    assert run(*args, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.json").read_text() == (tmp_path / "b" / "metrics.json").read_text()


def test_eval_refuses_training_scenes(tiny, tmp_path, capsys):
    train_id = json.loads((tiny["data"] / "manifest.json").read_text())["meta"]["splits"]["train"][0]
    args = ("eval", "--config", tiny["config"], "--checkpoint", tiny["run"] / "stylize.ckpt", "--data", tiny["data"],
            "--scenes", train_id)
    assert run(*args, "--out", tmp_path / "a") == cli.EXIT_USAGE
    assert "--allow-train-split" in capsys.readouterr().err
    assert run(*args, "--allow-train-split", "--out", tmp_path / "b") == 0


def test_missing_dataset_is_data_error(tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == cli.EXIT_DATA
