import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from helpers import directional_errors
from stylesplat.gaussians import (
    SCALE_FLOOR, GaussianSet, RawGaussianParams, activate, covariance, deactivate, read_sgs, write_sgs,
)


def raw(n=2, h=3, w=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    r = lambda c: torch.randn(n, h, w, c, generator=g, dtype=dtype)
    return RawGaussianParams(r(3), r(1), r(4), r(3), r(3))


def test_scalar_examples():
    p = raw(1, 1, 1)
    p.raw_opacity = torch.zeros(1, 1, 1, 1)
    p.raw_rotation = torch.tensor([[[[1.0, 0.0, 0.0, 0.0]]]])
    p.raw_scale = torch.zeros(1, 1, 1, 3)
    gs = activate(p)
    assert float(gs.opacities[0]) == 0.5
    assert torch.equal(gs.rotations[0].float(), torch.tensor([1.0, 0.0, 0.0, 0.0]))
    assert torch.allclose(gs.scales[0], torch.full((3,), SCALE_FLOOR + math.log(2.0), dtype=gs.scales.dtype))


def test_invariants_and_count():
    gs = activate(raw(2, 3, 4))
    assert gs.means.shape == (24, 3)
    assert torch.allclose(gs.rotations.norm(dim=-1), torch.ones(24, dtype=torch.float64), atol=1e-6)
    assert (gs.scales > 0).all()
    assert ((gs.opacities > 0) & (gs.opacities < 1)).all()
    assert ((gs.colors >= 0) & (gs.colors <= 1)).all()
    assert (gs.means[:, 2] > 0).all()


def test_center_mapping():
    p = raw(1, 2, 2)
    gs = activate(p)
    c = p.raw_center.reshape(-1, 3)
    assert torch.equal(gs.means[:, :2], c[:, :2])
    assert torch.allclose(gs.means[:, 2], torch.exp(c[:, 2]))


def test_zero_rotation_rejected():
    p = raw(1, 1, 2)
    p.raw_rotation = torch.zeros(1, 1, 2, 4, dtype=torch.float64)
    with pytest.raises(ValueError, match="zero norm"):
        activate(p)


def test_non_finite_rejected():
    p = raw(1, 1, 2)
    p.raw_color[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        activate(p)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 1, 6, 14), elements=st.floats(-4, 4)))
def test_activate_inverse_round_trip(values):
    t = torch.from_numpy(values)
    p = RawGaussianParams(t[..., 0:3], t[..., 3:4], t[..., 4:8] + torch.tensor([5.0, 0, 0, 0], dtype=t.dtype),
                          t[..., 8:11], t[..., 11:14])
    gs = activate(p)
    again = activate(deactivate(gs))
    for name in ("means", "opacities", "rotations", "scales", "colors"):
        assert torch.allclose(getattr(again, name), getattr(gs, name), atol=1e-6, rtol=1e-6), name


def test_covariance_examples():
    ident = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    assert torch.allclose(covariance(ident, torch.ones(3, dtype=torch.float64)), torch.eye(3, dtype=torch.float64))
    s = torch.tensor([2.0, 1.0, 1.0], dtype=torch.float64)
    assert torch.allclose(covariance(ident, s), torch.diag(torch.tensor([4.0, 1.0, 1.0], dtype=torch.float64)))
    # 90 degrees about z: independent check with an explicit rotation matrix
    q = torch.tensor([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)], dtype=torch.float64)
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    expected = Rz @ np.diag([4.0, 1.0, 1.0]) @ Rz.T
    np.testing.assert_allclose(covariance(q, s).numpy(), expected, atol=1e-12)
    np.testing.assert_allclose(expected, np.diag([1.0, 4.0, 1.0]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1),
       arrays(np.float64, 3, elements=st.floats(0.01, 3)))
def test_covariance_spd_eigs_and_double_cover(q, s):
    q = torch.from_numpy(q / np.linalg.norm(q))
    s = torch.from_numpy(s)
    cov = covariance(q, s)
    assert torch.allclose(cov, cov.T, atol=1e-12)
    eig = np.sort(np.linalg.eigvalsh(cov.numpy()))
    np.testing.assert_allclose(eig, np.sort(s.numpy() ** 2), rtol=1e-9, atol=1e-12)
    assert torch.allclose(covariance(-q, s), cov, atol=1e-12)


def test_activate_gradients():
    p = raw(1, 2, 5, seed=3)
    names = ["raw_center", "raw_opacity", "raw_rotation", "raw_scale", "raw_color"]
    w = torch.randn(10, 14, generator=torch.Generator().manual_seed(1), dtype=torch.float64)

    def fn(xs):
        gs = activate(RawGaussianParams(*xs))
        flat = torch.cat([gs.means, gs.opacities[:, None], gs.rotations, gs.scales, gs.colors], -1)
        return (flat * w).sum()

    err = directional_errors(fn, [getattr(p, n) for n in names], probes=10)
    assert err.max() <= 1e-3


def test_covariance_gradients():
    g = torch.Generator().manual_seed(5)
    q = torch.randn(10, 4, generator=g, dtype=torch.float64)
    q = q / q.norm(dim=-1, keepdim=True)
    s = torch.rand(10, 3, generator=g, dtype=torch.float64) + 0.1
    w = torch.randn(10, 3, 3, generator=g, dtype=torch.float64)
    err = directional_errors(lambda xs: (covariance(xs[0], xs[1]) * w).sum(), [q, s], probes=10)
    assert err.max() <= 1e-3


def test_sgs_round_trip(tmp_path):
    gs = activate(raw(1, 2, 3, dtype=torch.float32))
    write_sgs(tmp_path / "g.sgs", gs)
    data = (tmp_path / "g.sgs").read_bytes()
    assert data[:4] == b"SGS1" and int.from_bytes(data[4:8], "little") == 6
    assert len(data) == 8 + 6 * 14 * 4
    back = read_sgs(tmp_path / "g.sgs")
    for name in ("means", "opacities", "rotations", "scales", "colors"):
        assert torch.equal(getattr(back, name), getattr(gs, name))
    first = np.frombuffer(data[8:8 + 56], dtype="<f4")
    np.testing.assert_array_equal(first[:3], gs.means[0].numpy())
    assert first[3] == gs.opacities[0].item()


def test_sgs_rejects_bad_files(tmp_path):
    (tmp_path / "bad.sgs").write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(ValueError):
        read_sgs(tmp_path / "bad.sgs")
    (tmp_path / "short.sgs").write_bytes(b"SGS1" + (3).to_bytes(4, "little") + b"\x00" * 8)
    with pytest.raises(ValueError):
        read_sgs(tmp_path / "short.sgs")


def test_gaussian_set_helpers():
    gs = activate(raw(1, 1, 4, dtype=torch.float32))
    batched = GaussianSet(*(getattr(gs, n)[None] for n in ("means", "opacities", "rotations", "scales", "colors")))
    assert torch.equal(batched.index(0).means, gs.means)
    recolored = gs.with_colors(torch.zeros_like(gs.colors))
    assert torch.equal(recolored.means, gs.means) and recolored.colors.abs().sum() == 0
    assert len(gs) == 4
