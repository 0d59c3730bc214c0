import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fdcheck import grad_check
from sanerf import data, gradflow as gf
from sanerf.field import EncodingConfig, FieldConfig, RadianceField
from sanerf.geometry import Pose
from sanerf.renderer import (
    LAST_DELTA,
    RaySamples,
    RenderConfig,
    RenderError,
    RenderResult,
    _deltas,
    composite,
    expected_point,
    importance_samples,
    render_image,
    render_pixels,
    stratified_samples,
)


def samples_from(t):
    t = torch.as_tensor(np.atleast_2d(t), dtype=torch.float64)
    return RaySamples(t, _deltas(t))


def fake_coarse(t, w):
    t = torch.as_tensor(np.atleast_2d(t), dtype=torch.float64)
    w = torch.as_tensor(np.atleast_2d(w), dtype=torch.float64)
    return RenderResult(torch.zeros(len(t), 3), w, w.sum(1), 1 - w.sum(1), t)


# ---------------------------------------------------------------------------
# sampling


def test_stratified_bin_centres():
    s = stratified_samples(1, 0.0, 1.0, 2, jitter=False)
    np.testing.assert_allclose(s.t.numpy(), [[0.25, 0.75]])
    assert float(s.deltas[0, -1]) == LAST_DELTA


def test_stratified_each_sample_in_its_bin(rng):
    t = stratified_samples(50, 2.0, 6.0, 64, rng).t.numpy()
    lo = 2.0 + np.arange(64) * 4 / 64
    assert ((t >= lo) & (t <= lo + 4 / 64)).all()
    assert (np.diff(t, axis=1) > 0).all()


def test_stratified_deterministic_per_seed():
    a = stratified_samples(4, 2, 6, 8, np.random.default_rng(7)).t
    b = stratified_samples(4, 2, 6, 8, np.random.default_rng(7)).t
    assert torch.equal(a, b)


@pytest.mark.parametrize("n,near,far", [(1, 2, 6), (8, 6, 2), (8, 2, 2)])
def test_stratified_bad_arguments(n, near, far):
    with pytest.raises(RenderError):
        stratified_samples(1, near, far, n, jitter=False)


def test_stratified_jitter_needs_rng():
    with pytest.raises(RenderError, match="rng"):
        stratified_samples(1, 2, 6, 8)


def test_importance_spike_stays_in_bin(rng):
    t = np.linspace(2.25, 5.75, 8)
    w = np.zeros(8)
    w[3] = 0.7
    s = importance_samples(fake_coarse(t, w), 2.0, 6.0, 32, rng, merge=False)
    new = s.t.numpy()[0]
    lo, hi = 0.5 * (t[2] + t[3]), 0.5 * (t[3] + t[4])
    assert ((new >= lo) & (new <= hi)).all()
    assert not s.fallback[0]


def test_importance_uniform_weights_ks(rng):
    t = np.linspace(2.125, 5.875, 16)
    s = importance_samples(fake_coarse(t, np.full(16, 0.05)), 2.0, 6.0, 10_000, rng, merge=False)
    res = stats.kstest(s.t.numpy()[0], stats.uniform(loc=2.0, scale=4.0).cdf)
    assert res.statistic < 0.05


def test_importance_zero_weights_fall_back(rng):
    t = np.linspace(2.25, 5.75, 8)
    s = importance_samples(fake_coarse(np.stack([t, t]), np.zeros((2, 8))), 2.0, 6.0, 16, rng, merge=False)
    assert s.fallback.all()
    assert ((s.t >= 2.0) & (s.t <= 6.0)).all()


def test_importance_merge_sorted(rng):
    t = np.linspace(2.25, 5.75, 8)
    s = importance_samples(fake_coarse(t, rng.random(8)), 2.0, 6.0, 8, rng)
    assert s.t.shape == (1, 16)
    assert (np.diff(s.t.numpy(), axis=1) >= 0).all()


# ---------------------------------------------------------------------------
# compositing


def test_vacuum_is_black():
    s = samples_from(np.linspace(2, 6, 16))
    r = composite(s, torch.zeros(1, 16, dtype=torch.float64), torch.rand(1, 16, 3, dtype=torch.float64))
    assert float(r.acc[0]) == 0.0
    np.testing.assert_array_equal(r.color.numpy(), 0)
    assert float(r.trans_final[0]) == 1.0


def test_opaque_front_sample():
    s = samples_from(np.linspace(2, 6, 16))
    sigma = torch.zeros(1, 16, dtype=torch.float64)
    sigma[0, 0] = 1e6
    rgb = torch.rand(1, 16, 3, dtype=torch.float64)
    r = composite(s, sigma, rgb)
    assert float(r.weights[0, 0]) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(r.color[0].numpy(), rgb[0, 0].numpy(), atol=1e-12)


def test_three_sample_quadrature():
    t = torch.tensor([[1.0, 1.5, 2.0]], dtype=torch.float64)
    s = RaySamples(t, torch.full((1, 3), 0.5, dtype=torch.float64))
    rgb = torch.eye(3, dtype=torch.float64)[None]
    r = composite(s, torch.ones(1, 3, dtype=torch.float64), rgb)
    a = 1 - math.exp(-0.5)
    want = [a, math.exp(-0.5) * a, math.exp(-1.0) * a]
    np.testing.assert_allclose(r.weights[0].numpy(), want, rtol=1e-14)
    np.testing.assert_allclose(r.color[0].numpy(), want, rtol=1e-14)


def test_composite_rejects_negative_density():
    s = samples_from([2.0, 3.0])
    with pytest.raises(RenderError, match="negative"):
        composite(s, torch.tensor([[1.0, -0.1]], dtype=torch.float64), torch.zeros(1, 2, 3, dtype=torch.float64))


def test_composite_shape_mismatch():
    s = samples_from([2.0, 3.0])
    with pytest.raises(RenderError):
        composite(s, torch.zeros(1, 3, dtype=torch.float64), torch.zeros(1, 3, 3, dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([None, "python", "cython"]))
def test_weights_plus_transmittance_is_one(seed, backend):
    g = np.random.default_rng(seed)
    t = np.sort(g.uniform(2, 6, (20, 24)), axis=1)
    sigma = torch.as_tensor(g.exponential(g.uniform(0.01, 20), (20, 24)))
    r = composite(samples_from(t), sigma, torch.rand(20, 24, 3, dtype=torch.float64), backend)
    np.testing.assert_allclose((r.acc + r.trans_final).numpy(), 1.0, atol=1e-6)
    assert (r.weights >= 0).all() and float(r.acc.max()) <= 1 + 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 15), st.floats(0.0, 50.0))
def test_more_density_never_less_opacity(seed, k, bump):
    g = np.random.default_rng(seed)
    s = samples_from(np.sort(g.uniform(2, 6, 16)))
    sigma = torch.as_tensor(g.exponential(1.0, (1, 16)))
    rgb = torch.zeros(1, 16, 3, dtype=torch.float64)
    before = float(composite(s, sigma, rgb).acc[0])
    sigma[0, k] += bump
    assert float(composite(s, sigma, rgb).acc[0]) >= before - 1e-12


def test_composite_gradients_match_finite_differences(rng):
    t0 = np.sort(rng.uniform(2, 6, (3, 10)), axis=1)
    sigma0 = rng.uniform(0.1, 2.0, (3, 10))
    rgb0 = rng.uniform(0, 1, (3, 10, 3))

    def colour(sigma, rgb, t):
        return composite(RaySamples(t, _deltas(t)), sigma, rgb).color

    assert grad_check(colour, sigma0, rgb0, t0) < 1e-6


# ---------------------------------------------------------------------------
# expected point


def test_expected_point_opaque_surface():
    t = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    w = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    x, tot = expected_point(t, w, torch.zeros(1, 3, dtype=torch.float64),
                            torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64))
    np.testing.assert_allclose(x[0].numpy(), [0, 0, -2])
    assert float(tot[0]) == 1.0


def test_expected_point_empty_ray():
    x, tot = expected_point(torch.ones(1, 4), torch.zeros(1, 4), torch.ones(1, 3), torch.ones(1, 3))
    np.testing.assert_array_equal(x.numpy(), 0)
    assert float(tot[0]) == 0.0


def test_expected_point_two_equal_weights(rng):
    o, d = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    t = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
    w = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    x, _ = expected_point(t, w, torch.as_tensor(o), torch.as_tensor(d))
    np.testing.assert_allclose(x[0].numpy(), (o + 2 * d)[0], atol=1e-14)


def test_expected_point_normalised_variant():
    t = torch.tensor([[2.0, 4.0]], dtype=torch.float64)
    w = torch.tensor([[0.1, 0.1]], dtype=torch.float64)
    d = torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64)
    raw, _ = expected_point(t, w, torch.zeros(1, 3, dtype=torch.float64), d)
    norm, _ = expected_point(t, w, torch.zeros(1, 3, dtype=torch.float64), d, normalize=True)
    np.testing.assert_allclose(raw[0].numpy(), [0, 0, -0.6])
    np.testing.assert_allclose(norm[0].numpy(), [0, 0, -3.0])


# ---------------------------------------------------------------------------
# full pixel rendering


@pytest.fixture(scope="module")
def box_scene():
    return data.build_scene(data.box_scene_spec(), seed=0)


def test_analytic_field_reproduces_raycast_image(box_scene):
    f = data.AnalyticField(box_scene.tracer)
    cfg = RenderConfig(64, 64, box_scene.near, box_scene.far, perturb=False)
    pose = box_scene.poses[1]
    img, _ = render_image((f, f), pose.rotation, pose.translation, box_scene.intrinsics, cfg, dtype=torch.float64)
    assert np.abs(img - box_scene.images[1]).mean() < 2 / 255


def small_fields(seed=0):
    params = gf.ParamStore(torch.float64)
    g = np.random.default_rng(seed)
    cfg = FieldConfig(depth=2, width=16, pos_encoding=EncodingConfig(3), dir_encoding=EncodingConfig(2))
    return RadianceField(params, "c", cfg, g), RadianceField(params, "f", cfg, g)


def test_render_same_seed_identical(box_scene):
    fields = small_fields()
    pix = np.array([[3.0, 4.0], [20.5, 11.0], [40.0, 30.0]])
    cfg = RenderConfig(16, 16, 2.0, 6.0)
    outs = [render_pixels(fields, np.eye(3), np.zeros(3), box_scene.intrinsics, pix, cfg,
                          np.random.default_rng(5))[1].color for _ in range(2)]
    assert torch.equal(outs[0], outs[1])


def test_render_near_not_below_far(box_scene):
    cfg = RenderConfig(8, 8, 6.0, 2.0)
    with pytest.raises(RenderError):
        render_pixels(small_fields(), np.eye(3), np.zeros(3), box_scene.intrinsics, [[1.0, 1.0]], cfg,
                      np.random.default_rng(0))


def test_render_out_of_bounds_pixel(box_scene):
    cfg = RenderConfig(8, 8, 2.0, 6.0, perturb=False)
    with pytest.raises(RenderError, match="outside"):
        render_pixels(small_fields(), np.eye(3), np.zeros(3), box_scene.intrinsics, [[-1.0, 1.0]], cfg)


def test_colour_gradient_wrt_pose_translation(rng, box_scene):
    fields = small_fields(1)
    cfg = RenderConfig(24, 0, 2.0, 6.0, perturb=False)
    pix = rng.uniform(0, 30, (8, 2))
    rot = Pose.identity().rotation

    def colour(trans):
        return render_pixels(fields, rot, trans, box_scene.intrinsics, pix, cfg)[1].color

    assert grad_check(colour, rng.normal(0, 0.1, 3), h=1e-6) < 1e-3


def test_gradients_reach_pose_through_expected_point(rng, box_scene):
    fields = small_fields(2)
    cfg = RenderConfig(16, 16, 2.0, 6.0)
    t = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    _, fine = render_pixels(fields, np.eye(3), t, box_scene.intrinsics, rng.uniform(0, 30, (4, 2)), cfg, rng)
    fine.expected_point.sum().backward()
    assert float(t.grad.abs().sum()) > 0


def test_expected_point_on_surface_with_analytic_field():
    scene = data.build_scene(data.sphere_scene_spec(), seed=0)
    f = data.AnalyticField(scene.tracer)
    cfg = RenderConfig(64, 64, scene.near, scene.far, perturb=False)
    pose = scene.poses[0]
    depth = scene.depths[0]
    vv, uu = np.nonzero(np.isfinite(depth))
    pix = np.stack([uu, vv], axis=1).astype(np.float64)
    _, fine = render_pixels((f, f), pose.rotation, pose.translation, scene.intrinsics, pix, cfg)
    x = fine.expected_point.numpy()
    dirs = (x - pose.translation) / np.linalg.norm(x - pose.translation, axis=1, keepdims=True)
    t_hit, _ = scene.tracer.trace(pose.translation, dirs)
    err = np.abs(np.linalg.norm(x - pose.translation, axis=1) - t_hit)
    assert np.mean(err <= (scene.far - scene.near) / 64) >= 0.99
