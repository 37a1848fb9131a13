import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stylesplat.estimator import FeedForwardStylizer, check_cameras, check_image, check_style, check_views
from stylesplat.scene_data import Camera, SceneConfig, StyleImage, generate_scene, generate_style_corpus

TINY_MODEL = {
    "backbone": {"patch_size": 4, "width": 32, "depth": 2, "heads": 2},
    "structure": {"width": 32, "depth": 2, "heads": 2, "taps": (1, 2), "head_features": 8},
    "appearance": {"depth": 2, "heads": 2, "head_features": 8},
}


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    scenes = [generate_scene(s, SceneConfig(image_size=(16, 16))) for s in range(2)]
    styles = generate_style_corpus(0, 2, (16, 16))
    est = FeedForwardStylizer(nvs2_steps=1, nvs4_steps=1, stylize_steps=1, batch_size=1, image_size=(16, 16),
                              out_dir=str(tmp_path_factory.mktemp("est")), model_config=TINY_MODEL)
    return est.fit(scenes, styles), scenes, styles


def camera(size=16):
    return Camera(16.0, 16.0, 7.5, 7.5, np.eye(3), np.zeros(3), size, size)


def test_get_params_and_clone():
    est = FeedForwardStylizer(n_views=3, seed=4)
    params = est.get_params()
    assert params["n_views"] == 3 and params["seed"] == 4 and params["lr_high"] == 1e-3
    again = clone(est)
    assert again.get_params() == params and not hasattr(again, "model_")
    est.set_params(lr_low=1e-3)
    assert est.lr_low == 1e-3


def test_check_image():
    a = check_image(np.full((4, 4, 3), 255, np.uint8))
    assert a.dtype == np.float32 and a.max() == 1.0
    for bad in (np.zeros((4, 4)), np.full((4, 4, 3), np.nan), np.full((4, 4, 3), 1.5)):
        with pytest.raises(ValueError):
            check_image(bad)
    with pytest.raises(ValueError, match="model expects"):
        check_image(np.zeros((4, 4, 3)), (8, 8))


def test_check_views_and_style():
    img = np.zeros((8, 8, 3))
    assert check_views([img, img]).shape == (2, 8, 8, 3)
    for n in (1, 9):
        with pytest.raises(ValueError, match="views"):
            check_views([img] * n)
    with pytest.raises(ValueError):
        check_views([img, np.zeros((4, 4, 3))])
    assert check_style(StyleImage(np.ones((8, 8, 3), np.float32), "s")).shape == (8, 8, 3)


def test_check_cameras():
    assert len(check_cameras([camera()], (16, 16))) == 1
    with pytest.raises(ValueError):
        check_cameras([])
    with pytest.raises(TypeError):
        check_cameras(["not a camera"])
    with pytest.raises(ValueError):
        check_cameras([camera(32)], (16, 16))


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        FeedForwardStylizer().transform([np.zeros((64, 64, 3))] * 2)


def test_fit_transform_predict(fitted):
    est, scenes, styles = fitted
    assert set(est.checkpoints_) == {"nvs2", "nvs4", "stylize"}
    views = [v.image for v in scenes[0].views[:3]]
    gs = est.transform(views, styles[0])
    assert gs.means.shape == (3 * 256, 3)
    photo = est.transform(views)
    assert torch.equal(photo.means, gs.means) and not torch.equal(photo.colors, gs.colors)
    out = est.predict(views, [camera(), camera()], styles[1])
    assert out.shape == (2, 16, 16, 3) and np.isfinite(out).all()
    assert np.isfinite(est.score(scenes[:1]))


def test_from_checkpoint_matches_fitted(fitted):
    est, scenes, styles = fitted
    loaded = FeedForwardStylizer.from_checkpoint(est.checkpoints_["stylize"].path)
    assert loaded.get_params()["image_size"] == (16, 16)
    views = [v.image for v in scenes[1].views[:2]]
    np.testing.assert_array_equal(loaded.predict(views, [camera()], styles[0]),
                                  est.predict(views, [camera()], styles[0]))


def test_fit_validates_inputs(tmp_path):
    est = FeedForwardStylizer(image_size=(16, 16), out_dir=str(tmp_path), model_config=TINY_MODEL)
    with pytest.raises(ValueError):
        est.fit([], [])
    scene = generate_scene(0, SceneConfig(image_size=(16, 16)))
    with pytest.raises(ValueError, match="style"):
        est.fit([scene], [])
    with pytest.raises(ValueError, match="model expects"):
        est.fit([scene], [np.zeros((32, 32, 3))])
