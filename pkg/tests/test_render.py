import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nsmae import autodiff as ad
from nsmae.render import (
    FeatureVolume,
    RenderError,
    RenderHead,
    build_rays_bev,
    build_rays_perspective,
    composite_any,
    composite_color,
    composite_depth,
    render_view,
    transmittance,
    weights,
)
from nsmae.scene import CameraRig, GridMeta


def loop_composite(sigma, delta, values):
    """Scalar double loop: T_i from an explicit running sum, then w_i a_i accumulated."""
    out = [0.0] * len(values[0])
    for i in range(len(sigma)):
        acc = 0.0
        for j in range(i):
            acc += sigma[j] * delta[j]
        w = math.exp(-acc) * (1.0 - math.exp(-sigma[i] * delta[i]))
        for a in range(len(out)):
            out[a] += w * values[i][a]
    return out


def test_transmittance_examples():
    np.testing.assert_array_equal(transmittance(np.zeros(4), 0.3).data, np.ones(4))
    np.testing.assert_allclose(transmittance(np.ones(3), 0.5).data, [1, math.exp(-0.5), math.exp(-1)], rtol=1e-15)
    with pytest.raises(RenderError):
        transmittance(np.array([1.0, -0.1]), 0.5)


def test_three_sample_color_and_depth_by_hand():
    c, acc = composite_color(np.ones(3), 0.5, np.eye(3))
    w = [math.exp(-0.5 * i) * (1 - math.exp(-0.5)) for i in range(3)]
    np.testing.assert_allclose(c.data, w, atol=1e-15)
    np.testing.assert_allclose(c.data, [0.393469, 0.238651, 0.144749], atol=5e-7)
    assert acc.item() == pytest.approx(1 - math.exp(-1.5), abs=1e-15)
    d, _ = composite_depth(np.ones(3), 0.5)
    assert d.item() == pytest.approx(w[1] * 0.5 + w[2] * 1.0, abs=1e-15)
    assert d.item() == pytest.approx(0.264075, abs=1e-6)


def test_transparent_and_opaque_limits():
    c, acc = composite_color(np.zeros(5), 0.2, np.ones((5, 3)))
    assert not c.data.any() and acc.item() == 0
    s = np.array([100.0, 1.0, 1.0])
    col = np.array([[0.3, 0.6, 0.9], [1, 1, 1], [1, 1, 1]])
    c, _ = composite_color(s, 0.5, col)
    np.testing.assert_allclose(c.data, col[0], atol=1e-20)
    d, _ = composite_depth(s, 0.5)
    assert d.item() < 1e-20


def test_any_specialisations(rng):
    s = rng.uniform(0, 3, (7, 9))
    delta = rng.uniform(0.1, 1, (7, 9))
    col = rng.uniform(0, 1, (7, 9, 3))
    a, acc = composite_any(s, delta, col)
    b, _ = composite_color(s, delta, col)
    assert np.array_equal(a.data, b.data)
    ones, _ = composite_any(s, delta, np.ones((7, 9)))
    np.testing.assert_array_equal(ones.data, acc.data)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 24).flatmap(lambda n: st.tuples(
    hnp.arrays(float, n, elements=st.floats(0, 20)),
    hnp.arrays(float, n, elements=st.floats(0.01, 2)),
    hnp.arrays(float, (n, 2), elements=st.floats(-3, 3)),
)))
def test_composites_match_scalar_loop(case):
    s, d, a = case
    got, _ = composite_any(s, d, a)
    np.testing.assert_allclose(got.data, loop_composite(s, d, a), rtol=0, atol=1e-12)
    dist = np.concatenate([[0.0], np.cumsum(d)[:-1]])
    depth, _ = composite_depth(s, d)
    assert depth.item() == pytest.approx(loop_composite(s, d, dist[:, None])[0], abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 32).flatmap(lambda n: st.tuples(
    hnp.arrays(float, n, elements=st.floats(0, 50)),
    hnp.arrays(float, n, elements=st.floats(0.01, 2)),
)))
def test_weight_invariants(case):
    s, d = case
    T = transmittance(s, d).data
    assert T[0] == 1.0 and np.all(np.diff(T) <= 0)
    w = weights(s, d).data
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1 - math.exp(-np.sum(s * d)), abs=1e-14)
    depth, _ = composite_depth(s, d)
    assert -1e-15 <= depth.item() <= d.sum() + 1e-12


def test_occluder_blocks_everything_behind():
    s = np.full(16, 0.5)
    s[5] = 25.0  # sigma * delta = 20 at the occluder
    w = weights(s, 0.8).data
    assert w[6:].max() <= 1e-6
    assert w[5] > 0.9 * (1 - w[:5].sum())


def test_constant_ray_composite_equals_closed_form_for_any_n():
    # with constant sigma and radiance the weights telescope: sum w = 1 - exp(-sigma L) at every N
    exact = 1 - math.exp(-2.0)
    for n in (1, 7, 125, 1000):
        c, _ = composite_any(np.full(n, 2.0), 1.0 / n, np.ones(n))
        assert c.item() == pytest.approx(exact, abs=1e-13)


def test_bev_bundle_layout():
    meta = GridMeta((-8, -8, 0), (8, 8, 4), 0.25)
    b = build_rays_bev(meta)
    assert (b.n_rays, b.n_samples) == (4096, 16)
    np.testing.assert_array_equal(b.directions, np.tile([0, 0, -1.0], (4096, 1)))
    assert np.all(b.deltas == 0.2)
    # first sample is the top layer, positions descend
    assert np.all(np.diff(b.positions[..., 2], axis=1) < 0)
    flat, ok = meta.cell_index(b.positions.reshape(-1, 3))
    assert ok.all()
    np.testing.assert_array_equal(flat, b.sample_index.ravel())
    with pytest.raises(RenderError):
        build_rays_bev(meta, 0.0)


def test_perspective_bundle_layout():
    rig = CameraRig.looking(32, 64).scaled(4)
    b = build_rays_perspective(rig, np.array([1.0, 2.0, 3.0]))
    assert b.n_rays == 128 and b.n_samples == 3 and b.grid_shape == (8, 16)
    assert np.all(b.deltas == 0.8)
    # the principal point sits on a pixel corner at this resolution; the corner rays straddle the axis symmetrically
    c = b.directions.reshape(8, 16, 3)[3:5, 7:9].sum(axis=(0, 1))
    np.testing.assert_allclose(c / np.linalg.norm(c), [1, 0, 0], atol=1e-12)


def test_render_view_zero_density_and_one_hot_layer():
    meta = GridMeta((0, 0, 0), (2, 3, 1), 0.25)
    b = build_rays_bev(meta)
    X, Y, Z = meta.extents
    zero = FeatureVolume(ad.Tensor(np.zeros((X, Y, Z))), ad.Tensor(np.zeros((X, Y, Z, 1))), "bev")
    out = render_view(zero, b, "depth")
    assert out.values.shape == (X, Y) and not out.values.data.any() and not out.opacity.data.any()
    k = 1  # layer index from the bottom
    s = np.zeros((X, Y, Z))
    s[..., k] = 500.0
    out = render_view(FeatureVolume(ad.Tensor(s), ad.Tensor(np.zeros((X, Y, Z, 1))), "bev"), b, "depth")
    np.testing.assert_allclose(out.values.data, (Z - 1 - k) * 0.2, atol=1e-12)


def test_saturated_perspective_colour_is_radiance():
    rig = CameraRig.looking(8, 16).scaled(4)
    b = build_rays_perspective(rig, np.arange(1.0, 5.0))
    rho = np.array([0.2, 0.5, 0.7])
    vol = FeatureVolume(ad.Tensor(np.full((2, 4, 4), 60.0)), ad.Tensor(np.broadcast_to(rho, (2, 4, 4, 3)).copy()), "per")
    out = render_view(vol, b, "color")
    np.testing.assert_allclose(out.values.data, np.broadcast_to(rho, (2, 4, 3)), atol=1e-15)


def test_render_view_layout_errors():
    b = build_rays_bev(GridMeta((0, 0, 0), (1, 1, 1), 0.5))
    with pytest.raises(RenderError):
        render_view(FeatureVolume(ad.Tensor(np.zeros((2, 2, 3))), ad.Tensor(np.zeros((2, 2, 3, 1))), "bev"), b, "depth")
    with pytest.raises(RenderError):
        render_view(FeatureVolume(ad.Tensor(np.zeros((2, 2, 2))), ad.Tensor(np.zeros((2, 2, 2, 1))), "per"), b, "depth")
    with pytest.raises(RenderError):
        render_view(FeatureVolume(ad.Tensor(np.zeros((2, 2, 2))), ad.Tensor(np.zeros((2, 2, 2, 1))), "bev"), b, "normals")


def test_subset_bundle_matches_full_grid(rng):
    meta = GridMeta((0, 0, 0), (2, 2, 1), 0.25)
    b = build_rays_bev(meta)
    X, Y, Z = meta.extents
    s = rng.uniform(0, 4, (X, Y, Z))
    full = render_view(FeatureVolume(ad.Tensor(s), ad.Tensor(np.zeros((X, Y, Z, 1))), "bev"), b, "depth")
    ids = np.sort(rng.choice(X * Y, 13, replace=False))
    compact = s.reshape(-1)[b.cells(ids)].reshape(len(ids), 1, Z)
    sub = render_view(FeatureVolume(ad.Tensor(compact), ad.Tensor(np.zeros((len(ids), 1, Z, 1))), "bev"), b.subset(ids), "depth")
    np.testing.assert_array_equal(sub.values.data, full.values.data.reshape(-1)[ids])


def test_render_head_ranges_and_zero_init(rng):
    head = RenderHead("per", 4, 5, 3, rng)
    vol = head(ad.Tensor(rng.normal(size=(3, 4, 5, 4))))
    assert vol.sigma.shape == (3, 4, 5) and vol.radiance.shape == (3, 4, 5, 3)
    assert vol.sigma.data.min() >= 0 and 0 <= vol.radiance.data.min() and vol.radiance.data.max() <= 1
    head.zero_()
    vol = head(ad.Tensor(np.zeros((2, 2, 2, 4))))
    np.testing.assert_allclose(vol.sigma.data, math.log(2), rtol=1e-15)
    bev = RenderHead("bev", 4, 5, 1, rng, window=1)
    assert not set(head.parameters()) & set(bev.parameters())
    with pytest.raises(RenderError):
        RenderHead("side", 4, 5, 1, rng)
    with pytest.raises(RenderError):
        head(ad.Tensor(np.zeros((2, 2, 4))))


def test_head_and_composite_gradients(rng):
    rig = CameraRig.looking(8, 16).scaled(4)
    b = build_rays_perspective(rig, np.arange(1.0, 4.0))
    head = RenderHead("per", 3, 4, 3, rng)
    emb = ad.Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    tgt_c = rng.uniform(size=(2, 4, 3))
    tgt_d = rng.uniform(size=(2, 4))
    params = list(head.parameters().values()) + [emb]

    def f(*_):
        vol = head(emb)
        c = render_view(vol, b, "color").values
        d = render_view(vol, b, "depth").values
        return ad.add(ad.sum(ad.power(ad.sub(c, tgt_c), 2)), ad.sum(ad.power(ad.sub(d, tgt_d), 2)))

    coords = [(i, int(rng.integers(p.size))) for i, p in enumerate(params) for _ in range(6)]
    assert ad.grad_check(f, params, 1e-6, coords) <= 1e-4
