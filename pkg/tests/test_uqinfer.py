import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from logbseg.network import LoGBNet, NetworkConfig, predict
from logbseg.uqinfer import (
    PredictionEnsemble, UQError, UncertaintyMap, boundary_width_stat, confidence_bounds, export_surface,
    extract_surface, infer_volume, mc_predict, plot_slices, write_uncertainty,
)
from logbseg.voxelio import Volume, load_volume


@pytest.fixture
def model():
    torch.manual_seed(0)
    m = LoGBNet(NetworkConfig(depth=2, base_channels=2, aspp_channels=2, init_std=0.05))
    return m


@pytest.fixture
def vol():
    return Volume(np.random.default_rng(0).random((16, 16, 16)).astype(np.float32))


def ens(values):
    return PredictionEnsemble([Volume(np.full((2, 2, 2), v)) for v in values], len(values), 0)


def test_zero_std_members_identical(model, vol):
    with torch.no_grad():
        for vk in model.log_stream.layers:
            vk.rho.fill_(-1e4)
    e = mc_predict(model, vol, n=10, seed=1, crop_size=16)
    assert e.n == 10 and len(e.members) == 10
    assert all(np.array_equal(m.data, e.members[0].data) for m in e.members)
    u = confidence_bounds(e)
    assert np.all(u.width.data == 0)


def test_single_member(model, vol):
    e = mc_predict(model, vol, n=1, seed=2, crop_size=16)
    u = confidence_bounds(e)
    assert np.array_equal(u.mean.data, e.members[0].data)
    with pytest.raises(UQError):
        confidence_bounds(e, "normal")


def test_seeded_ensembles_repeat(model, vol):
    a = mc_predict(model, vol, n=3, seed=7, crop_size=16)
    b = mc_predict(model, vol, n=3, seed=7, crop_size=16)
    c = mc_predict(model, vol, n=3, seed=8, crop_size=16)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.members, b.members))
    assert not np.array_equal(a.members[0].data, a.members[1].data)
    assert not np.array_equal(a.members[0].data, c.members[0].data)


def test_minmax_bounds_example():
    u = confidence_bounds(ens([0.2, 0.8]))
    assert np.allclose(u.lower.data, 0.2) and np.allclose(u.upper.data, 0.8)
    assert np.allclose(u.mean.data, 0.5) and np.allclose(u.width.data, 0.6)


def test_normal_bounds_example():
    u = confidence_bounds(ens([0.2, 0.8]), "normal")
    sd = np.std([0.2, 0.8], ddof=1)
    assert sd == pytest.approx(0.4243, abs=1e-4)
    assert 1.96 * sd == pytest.approx(0.8316, abs=1e-4)
    assert np.all(u.lower.data == 0) and np.all(u.upper.data == 1)
    u = confidence_bounds(ens([0.5, 0.52, 0.48]), "normal")
    assert np.allclose(u.upper.data - u.mean.data, 1.96 * np.std([0.5, 0.52, 0.48], ddof=1))


def test_identical_members_zero_width():
    u = confidence_bounds(ens([0.3, 0.3, 0.3]))
    assert np.allclose(u.lower.data, u.upper.data) and np.all(u.width.data == 0)


def test_unknown_method():
    with pytest.raises(UQError):
        confidence_bounds(ens([0.1, 0.2]), "quantile")


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10 ** 6), st.sampled_from(["minmax", "normal"]))
def test_bounds_ordered(n, seed, method):
    rng = np.random.default_rng(seed)
    members = [Volume(rng.random((3, 3, 3))) for _ in range(n)]
    u = confidence_bounds(PredictionEnsemble(members, n, seed), method)
    assert np.all(u.lower.data <= u.mean.data) and np.all(u.mean.data <= u.upper.data)
    assert np.all(u.width.data >= 0)
    assert u.lower.data.min() >= 0 and u.upper.data.max() <= 1


def test_streaming_reference():
    rng = np.random.default_rng(3)
    members = [Volume(rng.random((4, 4, 4))) for _ in range(10)]
    u = confidence_bounds(PredictionEnsemble(members, 10, 0), "normal")
    # Welford running mean and variance
    mean = np.zeros((4, 4, 4))
    m2 = np.zeros((4, 4, 4))
    for k, m in enumerate(members, start=1):
        delta = m.data - mean
        mean += delta / k
        m2 += delta * (m.data - mean)
    sd = np.sqrt(m2 / 9)
    assert np.allclose(u.mean.data, mean, atol=1e-9)
    assert np.allclose(u.upper.data, np.clip(mean + 1.96 * sd, 0, 1), atol=1e-9)


def test_boundary_width_stat():
    gt = np.zeros((6, 6, 6))
    gt[1:5, 1:5, 1:5] = 1
    from logbseg.metrics import surface_mask
    w = surface_mask(gt).astype(float)
    zero = Volume(np.zeros_like(gt))
    u = UncertaintyMap(zero, zero, Volume(w), Volume(w))
    assert boundary_width_stat(u, gt) == {"boundary_mean_width": 1.0, "interior_mean_width": 0.0}
    u0 = UncertaintyMap(zero, zero, zero, zero)
    assert boundary_width_stat(u0, gt) == {"boundary_mean_width": 0.0, "interior_mean_width": 0.0}
    with pytest.raises(UQError):
        boundary_width_stat(u0, np.zeros_like(gt))


def test_single_crop_reconstruction(model, vol):
    g1, g2 = torch.Generator().manual_seed(4), torch.Generator().manual_seed(4)
    whole = infer_volume(model, vol, 16, g1, stochastic=True, overlap=True)
    single = predict(vol, model, g2, stochastic=True).probabilities
    assert np.allclose(whole.data, single, atol=1e-7)


def test_sliding_window_larger_volume(model):
    v = Volume(np.random.default_rng(1).random((20, 24, 16)).astype(np.float32))
    out = infer_volume(model, v, 16)
    assert out.shape == v.shape
    assert np.all((out.data > 0) & (out.data < 1))
    out2 = infer_volume(model, v, 16, overlap=True)
    assert out2.shape == v.shape


def test_small_volume_padded(model):
    v = Volume(np.random.default_rng(1).random((10, 16, 12)).astype(np.float32))
    assert infer_volume(model, v, 16).shape == (10, 16, 12)


def test_width_monotone_in_posterior_std(vol):
    torch.manual_seed(0)
    model = LoGBNet(NetworkConfig(depth=2, base_channels=2, aspp_channels=2, init_std=0.02))
    e1 = mc_predict(model, vol, n=6, seed=3, crop_size=16)
    with torch.no_grad():
        for vk in model.log_stream.layers:
            std = torch.nn.functional.softplus(vk.rho)
            target = 2 * std
            vk.rho.copy_(target + torch.log(-torch.expm1(-target)))
    e2 = mc_predict(model, vol, n=6, seed=3, crop_size=16)
    w1 = confidence_bounds(e1).width.data.mean()
    w2 = confidence_bounds(e2).width.data.mean()
    assert w2 >= w1


def ball(n=20, r=6.0, spacing=(1, 1, 1)):
    c = (n - 1) / 2
    i = np.arange(n) - c
    x, y, z = np.meshgrid(i, i, i, indexing="ij")
    return Volume((np.sqrt(x ** 2 + y ** 2 + z ** 2) <= r).astype(np.float32), spacing)


def test_ball_mesh_is_closed_sphere(tmp_path):
    mesh = export_surface(ball(), 0.5, tmp_path / "ball.obj")
    assert mesh.euler_characteristic() == 2
    text = (tmp_path / "ball.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in text) == len(mesh.vertices)
    assert sum(l.startswith("f ") for l in text) == len(mesh.faces)


def test_mesh_touching_border_is_closed():
    v = Volume(np.ones((6, 6, 6), np.float32))
    assert extract_surface(v, 0.5).euler_characteristic() == 2


def test_mesh_empty_and_level():
    with pytest.raises(UQError):
        extract_surface(Volume(np.zeros((8, 8, 8))), 0.5)
    with pytest.raises(UQError):
        extract_surface(ball(), 1.5)


def test_mesh_scales_with_spacing():
    a = extract_surface(ball(spacing=(1, 1, 1)))
    b = extract_surface(ball(spacing=(0.8, 0.8, 0.3)))
    assert np.allclose(b.vertices, a.vertices * np.array([0.8, 0.8, 0.3]), atol=1e-6)


def test_write_and_plot(tmp_path, model, vol):
    u = confidence_bounds(mc_predict(model, vol, n=3, seed=0, crop_size=16))
    paths = write_uncertainty(u, tmp_path / "case")
    assert [p.name for p in paths] == ["case_mean.json", "case_lower.json", "case_upper.json", "case_width.json"]
    assert np.allclose(load_volume(tmp_path / "case_width").data, u.width.data, atol=1e-7)
    gt = np.zeros((16, 16, 16), np.float32)
    gt[4:12, 4:12, 4:12] = 1
    out = plot_slices(u, tmp_path / "plots", image=vol, gt=Volume(gt))
    assert any(p.suffix == ".png" for p in out)
    assert (tmp_path / "plots" / "width_stats.csv").exists()
