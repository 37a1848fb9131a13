import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stylesplat.scene_data import (
    BACKGROUND_COLOR, BACKGROUND_DEPTH, Camera, ChecksumError, MissingManifestError, SceneConfig, VersionError,
    ViewSample, check_overlap, compute_gt_flow, flow_round_trip_error, generate_scene, generate_style_corpus,
    load_dataset, look_at, orbit_cameras, render_ground_truth, save_dataset,
)

TEX = {"pattern": "stripes", "color_a": [0.9, 0.2, 0.1], "color_b": [0.1, 0.3, 0.8], "frequency": 4.0,
       "phase": [0.0, 0.0, 0.0], "direction": [1.0, 0.0, 0.0]}


def cam(R=None, t=None, f=64.0, cx=32.0, cy=32.0, size=64):
    return Camera(f, f, cx, cy, np.eye(3) if R is None else R, np.zeros(3) if t is None else t, size, size)


def plane(z, half=50.0, texture=TEX):
    return {"kind": "quad", "center": [0.0, 0.0, z], "u": [1.0, 0.0, 0.0], "v": [0.0, 1.0, 0.0],
            "half": [half, half], "texture": texture}


def view(prims, camera):
    img, depth = render_ground_truth(prims, camera)
    return ViewSample(img, camera, depth)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(0)


def test_scene_shape_and_positive_depth(scene):
    assert len(scene.views) == 12
    for v in scene.views:
        assert v.image.shape == (64, 64, 3)
        assert np.all(v.depth > 0) and np.all(np.isfinite(v.depth))
        assert v.image.min() >= 0 and v.image.max() <= 1


def test_scene_is_deterministic(scene):
    again = generate_scene(0)
    assert scene.primitives == again.primitives
    for a, b in zip(scene.views, again.views):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.depth, b.depth)
        assert a.camera == b.camera


def test_different_seeds_differ():
    a, b = generate_scene(1), generate_scene(2)
    assert a.views[0].image.sum() != b.views[0].image.sum()


def test_primitive_count_in_range(scene):
    objects = [p for p in scene.primitives if p.get("name") is None]
    assert 5 <= len(scene.primitives) <= 20
    assert 5 <= len(objects) <= 10


def test_trajectory_rotation_step_below_10_degrees(scene):
    for a, b in zip(scene.views, scene.views[1:]):
        rel = b.camera.rotation.astype(np.float64) @ a.camera.rotation.astype(np.float64).T
        angle = np.degrees(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1, 1)))
        assert angle < 10.0


def test_overlap_invariant(scene):
    assert check_overlap(scene, 0.3)
    for v in scene.views[:-1]:
        assert v.flow_valid.mean() >= 0.3


@pytest.mark.parametrize("kwargs", [dict(n_frames=11), dict(image_size=(60, 64)), dict(n_primitives=(2, 4))])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        generate_scene(0, SceneConfig(**kwargs))


def test_camera_validate():
    with pytest.raises(ValueError):
        cam(R=np.diag([1.0, 1.0, 2.0])).validate()
    with pytest.raises(ValueError):
        cam(f=-1.0).validate()
    with pytest.raises(ValueError):
        cam(cx=64.0).validate()


def test_empty_scene_is_background():
    img, depth = render_ground_truth([], cam())
    assert np.all(img == BACKGROUND_COLOR)
    assert np.all(depth == BACKGROUND_DEPTH)


def test_unit_sphere_depth_at_principal_point():
    sphere = {"kind": "sphere", "center": [0.0, 0.0, 4.0], "radius": 1.0, "texture": TEX}
    _, depth = render_ground_truth([sphere], cam())
    assert depth[32, 32] == pytest.approx(3.0, abs=1e-5)


def test_roll_rotates_the_image():
    # with cx = cy = 31.5 a 90-degree roll is an exact np.rot90 of the pixel grid
    sphere = {"kind": "sphere", "center": [0.4, -0.3, 4.0], "radius": 0.8,
              "texture": {**TEX, "pattern": "rings", "frequency": 3.0}}
    c = 31.5
    a = render_ground_truth([sphere], cam(cx=c, cy=c))
    roll = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # camera rotated +90 about z
    b = render_ground_truth([sphere], cam(R=roll, cx=c, cy=c))
    # p' = roll p maps (x, y) -> (y, -x), so pixel (u, v) -> (v, 63 - u)
    expected_img = np.rot90(a[0], k=1)
    expected_depth = np.rot90(a[1], k=1)
    np.testing.assert_allclose(b[1], expected_depth, rtol=1e-5)
    np.testing.assert_allclose(b[0], expected_img, atol=1e-5)


def test_identical_views_zero_flow(scene):
    v = scene.views[0]
    flow, valid = compute_gt_flow(v, v)
    fg = v.depth < BACKGROUND_DEPTH
    assert np.abs(flow).max() < 1e-4  # float32 camera round-off only
    assert np.all(valid[fg])


def test_translation_flow_closed_form():
    depth = 5.0
    base = 0.2
    a = view([plane(depth)], cam())
    # camera moves +x by `base`; world->camera t = -C
    b = view([plane(depth)], cam(t=np.array([-base, 0.0, 0.0])))
    flow, valid = compute_gt_flow(a, b)
    expected = -64.0 * base / depth
    for (i, j) in [(10, 20), (32, 32), (50, 40)]:
        assert valid[i, j]
        assert flow[i, j, 0] == pytest.approx(expected, abs=1e-4)
        assert flow[i, j, 1] == pytest.approx(0.0, abs=1e-4)


def test_occluded_point_is_invalid():
    # back wall z=6, a thin blocker at z=3 spanning x in [0.3, 0.9]; camera b sits at x=+1.
    # Pixel u=36 in a sees the wall at X=0.375; in b that point projects to u=25.33, which the
    # blocker (b-frame x in [-0.7, -0.1] -> u in [17.1, 29.9]) covers. Pixel u=60 (X=2.625)
    # lands at u=49.3 in b and stays visible.
    back = plane(6.0)
    blocker = {"kind": "quad", "center": [0.6, 0.0, 3.0], "u": [1.0, 0.0, 0.0], "v": [0.0, 1.0, 0.0],
               "half": [0.3, 3.0], "texture": TEX}
    a = view([back, blocker], cam())
    b = view([back, blocker], cam(t=np.array([-1.0, 0.0, 0.0])))
    flow, valid = compute_gt_flow(a, b)
    assert a.depth[32, 36] > 5.9 and b.depth[32, 25] < 3.5
    assert not valid[32, 36]
    assert valid[32, 60]
    assert flow[32, 60, 0] == pytest.approx(-64.0 / 6.0, abs=1e-3)


def test_flow_round_trip(scene):
    for k in (0, 5):
        err = flow_round_trip_error(scene.views[k], scene.views[k + 1])
        finite = err[np.isfinite(err)]
        assert finite.size > 100
        assert finite.max() <= 0.5


def test_style_corpus_distinct_and_deterministic():
    corpus = generate_style_corpus(0, 8)
    assert len(corpus) == 8
    means = np.array([s.image.reshape(-1, 3).mean(0) for s in corpus])
    for i in range(8):
        for j in range(i + 1, 8):
            assert np.linalg.norm(means[i] - means[j]) > 0
    again = generate_style_corpus(0, 8)
    assert all(np.array_equal(a.image, b.image) and a.id == b.id for a, b in zip(corpus, again))
    one = generate_style_corpus(3, 1)
    assert len(one) == 1 and one[0].image.min() >= 0 and one[0].image.max() <= 1


def test_dataset_round_trip(tmp_path, scene):
    styles = generate_style_corpus(0, 2)
    save_dataset([scene], styles, tmp_path)
    records, loaded_styles = load_dataset(tmp_path)
    assert [s.id for s in loaded_styles] == [s.id for s in styles]
    for a, b in zip(scene.views, records[0].views):
        assert a.camera == b.camera
        assert np.array_equal(a.depth, b.depth)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-7
        if a.flow_to_next is not None:
            assert np.array_equal(a.flow_to_next, b.flow_to_next)
            assert np.array_equal(a.flow_valid, b.flow_valid)
    assert records[0].primitives == json.loads(json.dumps(scene.primitives))
    assert check_overlap(records[0])


def test_dataset_errors(tmp_path, scene):
    with pytest.raises(MissingManifestError):
        load_dataset(tmp_path)
    save_dataset([scene], generate_style_corpus(0, 1), tmp_path)
    target = tmp_path / "scenes" / scene.scene_id / "frame_3.png"
    data = bytearray(target.read_bytes())
    data[-20] ^= 0xFF
    target.write_bytes(bytes(data))
    with pytest.raises(ChecksumError, match="frame_3.png"):
        load_dataset(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionError):
        load_dataset(tmp_path)


def test_dataset_rerun_same_checksums(tmp_path):
    recs = [generate_scene(4)]
    styles = generate_style_corpus(4, 2)
    save_dataset(recs, styles, tmp_path / "a")
    save_dataset(recs, styles, tmp_path / "b")
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["checksums"] == mb["checksums"]


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_camera_bytes_round_trip(yaw, pitch, x, y, z):
    R, t = look_at(np.array([x, y, z]), np.array([np.sin(yaw), np.sin(pitch), 5.0]))
    c = Camera(60.0, 61.0, 31.5, 30.5, R, t, 64, 64)
    c.validate()
    assert Camera.from_bytes(c.to_bytes(), 64, 64) == c


def test_relative_to_self_is_identity(scene):
    c = scene.views[3].camera
    rel = c.relative_to(c)
    np.testing.assert_allclose(rel.rotation, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(rel.translation, 0, atol=1e-5)


def test_orbit_cameras_center_frame_is_reference():
    cams = orbit_cameras(cam(), 5, degrees=6.0)
    mid = cams[2]
    np.testing.assert_allclose(mid.rotation, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(mid.translation, 0, atol=1e-6)
    for c in cams:
        c.validate()
