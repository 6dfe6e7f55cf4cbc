import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raypatch import autodiff as ad
from raypatch.autodiff import Graph, Tensor
from raypatch import fields as F
from raypatch import render as R
from raypatch.geometry import Ray


@pytest.fixture(scope="module")
def sphere_field():
    return F.AnalyticField(F.AnalyticShape("sphere", radius=0.5))


@pytest.fixture(scope="module")
def desk_params():
    return F.init_fields(F.FieldConfig.desk(), np.random.default_rng(21))


def axis_rays(n_side=9, span=0.6, z=-3.0):
    xs = np.linspace(-span, span, n_side)
    o = np.stack([np.repeat(xs, n_side), np.tile(xs, n_side),
                  np.full(n_side * n_side, z)], axis=1)
    d = np.zeros_like(o)
    d[:, 2] = 1.0
    return o, d


class ConstantField:
    """sdf == value everywhere, color == rgb everywhere; graph-compatible."""

    def __init__(self, value, rgb=(0.3, 0.5, 0.7)):
        self.value = value
        self.rgb = np.asarray(rgb, dtype=np.float64)

    def sdf_eval(self, x):
        xt = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        n = xt.shape[0]
        s = ad.tsum(ad.mul(xt, 0.0), axis=1)  # keeps the graph connected
        return ad.add(s, self.value), Tensor(np.zeros((n, 1)))

    def color_eval(self, x, v, n, feature):
        count = x.shape[0] if hasattr(x, "shape") else len(x)
        return Tensor(np.tile(self.rgb, (count, 1)))


# -- stratified sampling ---------------------------------------------------------

def test_stratified_midpoints():
    ss = R.stratified_samples((np.zeros((1, 3)), np.array([[0, 0, 1.0]])), 0, 4, 4)
    np.testing.assert_array_equal(ss.t[0], [0.5, 1.5, 2.5, 3.5])
    np.testing.assert_array_equal(ss.deltas[0], [1.0, 1.0, 1.0, 1.0])


def test_stratified_jitter_deterministic():
    rays = (np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)))
    a = R.stratified_samples(rays, 1, 5, 16, np.random.default_rng(3), jitter=True)
    b = R.stratified_samples(rays, 1, 5, 16, np.random.default_rng(3), jitter=True)
    np.testing.assert_array_equal(a.t, b.t)


@settings(max_examples=30)
@given(near=st.floats(0, 5), width=st.floats(0.1, 10), n=st.integers(2, 64),
       seed=st.integers(0, 100), jitter=st.booleans())
def test_stratified_in_range_and_increasing(near, width, n, seed, jitter):
    rays = (np.zeros((2, 3)), np.tile([0, 0, 1.0], (2, 1)))
    ss = R.stratified_samples(rays, near, near + width, n,
                              np.random.default_rng(seed), jitter=jitter)
    assert np.all(ss.t >= near) and np.all(ss.t < near + width)
    assert np.all(np.diff(ss.t, axis=1) > 0)
    assert np.all(ss.deltas > 0)


def test_stratified_validation():
    rays = (np.zeros((1, 3)), np.array([[0, 0, 1.0]]))
    with pytest.raises(ValueError):
        R.stratified_samples(rays, 2, 2, 8)
    with pytest.raises(ValueError):
        R.stratified_samples(rays, 0, 1, 1)
    with pytest.raises(ValueError):
        R.stratified_samples(rays, 0, 1, 8, jitter=True)  # jitter needs rng


def test_sampleset_far_cap():
    ss = R.stratified_samples((np.zeros((1, 3)), np.array([[0, 0, 1.0]])), 1, 3, 8)
    assert ss.deltas[0, -1] == pytest.approx((3 - 1) / 8)


# -- density ----------------------------------------------------------------------

def test_density_at_zero_is_half_alpha():
    for kind in ("laplace", "logistic"):
        cfg = R.DensityConfig(alpha=2.0, beta=0.3, kind=kind)
        assert R.density(0.0, cfg) == pytest.approx(1.0)


def test_density_laplace_closed_form():
    cfg = R.DensityConfig(alpha=1.0, beta=0.1)
    assert R.density(-0.1, cfg) == pytest.approx(1 - 0.5 * math.exp(-1), abs=1e-12)


def test_density_limits():
    cfg = R.DensityConfig(alpha=3.0, beta=0.05)
    assert R.density(50.0, cfg) == pytest.approx(0.0, abs=1e-12)
    assert R.density(-50.0, cfg) == pytest.approx(3.0, abs=1e-12)


@settings(max_examples=40)
@given(alpha=st.floats(0.01, 100), beta=st.floats(0.001, 10),
       kind=st.sampled_from(["laplace", "logistic"]))
def test_density_monotone_decreasing(alpha, beta, kind):
    cfg = R.DensityConfig(alpha=alpha, beta=beta, kind=kind)
    s = np.linspace(-5, 5, 201)
    vals = R.density(s, cfg)
    assert np.all(np.diff(vals) <= 1e-12 * alpha)
    assert np.all(vals >= 0) and np.all(vals <= alpha + 1e-12)


def test_density_tensor_matches_numpy():
    cfg = R.DensityConfig(alpha=1.7, beta=0.07)
    s = np.linspace(-2, 2, 41)
    with Graph():
        got = R.density(Tensor(s), cfg).data
    np.testing.assert_allclose(got, R.density(s, cfg), atol=1e-15)


def test_density_config_validation():
    with pytest.raises(ValueError):
        R.DensityConfig(alpha=0.0, beta=0.1)
    with pytest.raises(ValueError):
        R.DensityConfig(alpha=1.0, beta=-0.1)
    with pytest.raises(ValueError):
        R.DensityConfig(kind="gauss")


# -- transmittance and weights ------------------------------------------------------

def test_transmittance_vacuum():
    with Graph():
        T = R.transmittance(Tensor(np.zeros((2, 5))), np.full((2, 5), 0.3))
    np.testing.assert_array_equal(T.data, np.ones((2, 5)))


def test_transmittance_single_segment():
    with Graph():
        T = R.transmittance(Tensor(np.array([[1.0, 0.0]])), np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(T.data[0], [1.0, math.exp(-1)], atol=1e-15)


def test_transmittance_segment_split_invariant():
    sig = np.array([[0.7, 1.3, 0.2]])
    dl = np.array([[0.5, 0.4, 0.3]])
    split_sig = np.array([[0.7, 1.3, 1.3, 0.2]])
    split_dl = np.array([[0.5, 0.2, 0.2, 0.3]])
    with Graph():
        a = R.transmittance(Tensor(sig), dl).data[0]
        b = R.transmittance(Tensor(split_sig), split_dl).data[0]
        fa = R.final_transmittance(Tensor(sig), dl).data[0]
        fb = R.final_transmittance(Tensor(split_sig), split_dl).data[0]
    assert b[3] == pytest.approx(a[2], abs=1e-15)  # downstream unchanged
    assert fa == pytest.approx(fb, abs=1e-15)


def test_transmittance_monotone_nonincreasing():
    rng = np.random.default_rng(4)
    with Graph():
        T = R.transmittance(Tensor(rng.uniform(0, 30, (50, 40))),
                            rng.uniform(0.001, 0.3, (50, 40)))
    assert np.all(np.diff(T.data, axis=1) <= 0)


def test_weights_vacuum_and_single_segment():
    with Graph():
        w0 = R.render_weights(Tensor(np.zeros((1, 4))), np.ones((1, 4)))
        w1 = R.render_weights(Tensor(np.array([[1.0]])), np.array([[1.0]]))
    np.testing.assert_array_equal(w0.data, np.zeros((1, 4)))
    assert w1.data[0, 0] == pytest.approx(1 - math.exp(-1), abs=1e-15)


def test_weight_identity_random():
    rng = np.random.default_rng(7)
    with Graph():
        sig = Tensor(rng.uniform(0, 80, size=(200, 48)))
        dl = rng.uniform(1e-4, 0.5, size=(200, 48))
        w = R.render_weights(sig, dl)
        tf = R.final_transmittance(sig, dl)
    total = w.data.sum(axis=1) + tf.data
    assert np.abs(total - 1).max() < 1e-9
    assert np.all(w.data >= 0)


def test_shape_mismatch_rejected():
    with Graph():
        with pytest.raises(ad.ShapeMismatchError):
            R.transmittance(Tensor(np.zeros((1, 4))), np.ones((1, 5)))
        with pytest.raises(ad.ShapeMismatchError):
            R.render_weights(Tensor(np.zeros((2, 4))), np.ones((1, 4)))


# -- volume rendering ----------------------------------------------------------------

def test_volume_render_constant_color():
    # deep inside a solid: weights sum to ~1 so the output is the field color
    field = ConstantField(-2.0, rgb=(0.2, 0.9, 0.4))
    ss = R.stratified_samples((np.zeros((1, 3)), np.array([[0, 0, 1.0]])), 0.1, 2, 32)
    with Graph():
        res = R.volume_render(ss, field, R.DensityConfig(alpha=20.0, beta=0.1))
    assert res.weights.data.sum() > 1 - 1e-9
    np.testing.assert_allclose(res.color.data[0], [0.2, 0.9, 0.4], atol=1e-9)


def test_volume_render_empty_space():
    field = ConstantField(60.0)
    ss = R.stratified_samples((np.zeros((2, 3)), np.tile([0, 0, 1.0], (2, 1))), 0.1, 2, 16)
    with Graph():
        res = R.volume_render(ss, field, R.DensityConfig(alpha=1.0, beta=0.1))
    np.testing.assert_allclose(res.color.data, 0.0, atol=1e-12)
    np.testing.assert_allclose(res.transmittance_final.data, 1.0, atol=1e-12)


def test_volume_render_background_color():
    field = ConstantField(60.0)
    ss = R.stratified_samples((np.zeros((1, 3)), np.array([[0, 0, 1.0]])), 0.1, 2, 16)
    with Graph():
        res = R.volume_render(ss, field, R.DensityConfig(alpha=1.0, beta=0.1),
                              background=(1.0, 0.5, 0.25))
    np.testing.assert_allclose(res.color.data[0], [1.0, 0.5, 0.25], atol=1e-12)


def test_volume_depth_uniform_weights_hits_center():
    field = ConstantField(0.5)  # tiny constant density
    ss = R.stratified_samples((np.zeros((1, 3)), np.array([[0, 0, 1.0]])), 1, 3, 21)
    with Graph():
        res = R.volume_render(ss, field, R.DensityConfig(alpha=1.0, beta=0.05))
    assert res.depth.data[0] == pytest.approx(2.0, abs=1e-3)


def test_volume_depth_opaque_wall():
    # solid half-space starting at z=2: nearly all weight on the first sample past it
    class Wall:
        def sdf_eval(self, x):
            xt = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
            s = ad.sub(2.0, xt[:, 2])
            return s, Tensor(np.zeros((xt.shape[0], 1)))

        color_eval = ConstantField(0).color_eval

    ss = R.stratified_samples((np.zeros((1, 3)), np.array([[0, 0, 1.0]])), 0.5, 3.5, 300)
    with Graph():
        res = R.volume_render(ss, Wall(), R.DensityConfig(alpha=500.0, beta=0.002))
    assert res.depth.data[0] == pytest.approx(2.0, abs=0.02)
    assert res.weights.data.max() > 0.5


def test_volume_render_lambertian_cross_check(sphere_field):
    o, d = axis_rays()
    tc = R.TraceConfig(t_min=2.0, t_max=4.0)
    hit, t = R.sphere_trace_batch(o, d, sphere_field.sdf_fn(), tc)
    pts = o + t[:, None] * d
    nrm = F.analytic_normal(sphere_field.shape, pts)
    ref = np.zeros((len(o), 3))
    ref[hit] = F.lambert_shade(nrm[hit], sphere_field.light_dir, sphere_field.albedo)

    ss = R.stratified_samples((o, d), 2.0, 4.0, 128)
    with Graph():
        res = R.volume_render(ss, sphere_field, R.DensityConfig(alpha=500.0, beta=0.002))
    color_err = np.abs(res.color.data - ref)[hit].max()
    depth_err = np.abs(res.depth.data - t)[hit].max()
    assert color_err < 0.02
    assert depth_err < 0.01


def test_volume_render_quadrature_convergence(sphere_field):
    o, d = axis_rays(n_side=5, span=0.45)
    tc = R.TraceConfig(t_min=2.0, t_max=4.0)
    hit, t = R.sphere_trace_batch(o, d, sphere_field.sdf_fn(), tc)
    pts = o + t[:, None] * d
    nrm = F.analytic_normal(sphere_field.shape, pts)
    ref = np.zeros((len(o), 3))
    ref[hit] = F.lambert_shade(nrm[hit], sphere_field.light_dir, sphere_field.albedo)
    errs = []
    for n in (32, 64, 128):
        ss = R.stratified_samples((o, d), 2.0, 4.0, n)
        with Graph():
            res = R.volume_render(ss, sphere_field, R.DensityConfig(alpha=500.0, beta=0.002))
        errs.append(np.abs(res.color.data - ref)[hit].max())
    assert errs[1] < errs[0] and errs[2] < errs[1]


def test_volume_render_identity_on_learned_field(desk_params):
    o, d = axis_rays(n_side=4, span=0.5)
    ss = R.stratified_samples((o, d), 2.0, 4.0, 24)
    with Graph():
        res = R.volume_render(ss, desk_params, R.DensityConfig(alpha=10.0, beta=0.1))
    total = res.weights.data.sum(axis=1) + res.transmittance_final.data
    assert np.abs(total - 1).max() < 1e-9
    assert np.all(res.depth.data >= 2.0) and np.all(res.depth.data <= 4.0)


def test_rendered_depth_surface_points():
    res = R.RenderResult(Tensor(np.zeros((2, 3))), np.array([2.0, 3.0]), None,
                         Tensor(np.zeros(2)),
                         np.zeros((2, 3)), np.tile([0, 0, 1.0], (2, 1)))
    pts = R.rendered_depth(res)
    np.testing.assert_allclose(pts, [[0, 0, 2.0], [0, 0, 3.0]])


def test_rendered_depth_analytic_scene(sphere_field):
    o, d = axis_rays()
    tc = R.TraceConfig(t_min=2.0, t_max=4.0)
    hit, t = R.sphere_trace_batch(o, d, sphere_field.sdf_fn(), tc)
    ss = R.stratified_samples((o, d), 2.0, 4.0, 128)
    with Graph():
        res = R.volume_render(ss, sphere_field, R.DensityConfig(alpha=500.0, beta=0.002))
    pts = R.rendered_depth(res)
    expect = o + t[:, None] * d
    assert np.abs(pts[hit] - expect[hit]).max() < 0.01


# -- importance resampling -------------------------------------------------------------

def test_importance_concentrates_samples(sphere_field):
    o = np.array([[0.0, 0.0, -3.0], [0.2, 0.1, -3.0]])
    d = np.tile([0, 0, 1.0], (2, 1))
    dc = R.DensityConfig(alpha=500.0, beta=0.002)
    coarse = R.stratified_samples((o, d), 2.0, 4.0, 64)
    with Graph():
        r0 = R.volume_render(coarse, sphere_field, dc)
    fine = R.importance_resample(coarse, r0.weights.data, 64)
    assert fine.t.shape == (2, 128)
    assert np.all(np.diff(fine.t, axis=1) > 0)
    # surface near t=2.5; refined set should crowd around it
    near_surface = np.sum((fine.t > 2.4) & (fine.t < 2.6), axis=1)
    assert np.all(near_surface >= 40)
    with Graph():
        r1 = R.volume_render(fine, sphere_field, dc)
    assert abs(r1.depth.data[0] - 2.5) < abs(r0.depth.data[0] - 2.5)


def test_importance_deterministic_and_seeded():
    rays = (np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)))
    coarse = R.stratified_samples(rays, 0, 4, 16)
    w = np.random.default_rng(0).uniform(size=(3, 16))
    a = R.importance_resample(coarse, w, 8)
    b = R.importance_resample(coarse, w, 8)
    np.testing.assert_array_equal(a.t, b.t)
    c = R.importance_resample(coarse, w, 8, rng=np.random.default_rng(5))
    e = R.importance_resample(coarse, w, 8, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(c.t, e.t)


def test_importance_validation():
    rays = (np.zeros((1, 3)), np.array([[0, 0, 1.0]]))
    coarse = R.stratified_samples(rays, 0, 4, 8)
    with pytest.raises(ValueError):
        R.importance_resample(coarse, np.ones((1, 8)), 0)
    with pytest.raises(ValueError):
        R.importance_resample(coarse, np.ones((1, 9)), 4)


# -- central-dense sampling --------------------------------------------------------------

def make_bundle(s=3):
    from raypatch.geometry import Camera, build_bundles
    cam = Camera(fx=60.0, fy=60.0, cx=16, cy=16, c2w=np.eye(4), width=32, height=32)
    img = np.zeros((32, 32, 3))
    return build_bundles(cam, img, 1, s, np.random.default_rng(0))[0]


def test_central_dense_memory_arithmetic():
    b = make_bundle(3)
    central, surround = R.central_dense_sampling(b, 1, 3, 64, 16)
    total = central.t.size + surround.t.size
    assert total == 192
    assert 3 * 3 * 64 == 576  # the uniform-dense alternative


def test_central_dense_equal_counts_degenerate():
    b = make_bundle(3)
    central, surround = R.central_dense_sampling(b, 1, 3, 16, 16)
    assert central.n_samples == surround.n_samples == 16
    assert central.n_rays + surround.n_rays == 9


def test_central_dense_single_ray():
    b = make_bundle(1)
    central, surround = R.central_dense_sampling(b, 1, 3, 32, 8)
    assert surround is None
    assert central.t.shape == (1, 32)


def test_central_dense_validation():
    b = make_bundle(3)
    with pytest.raises(ValueError):
        R.central_dense_sampling(b, 1, 3, 8, 16)
    with pytest.raises(ValueError):
        R.central_dense_sampling(b, 1, 3, 8, 1)


def test_central_ray_goes_through_anchor():
    b = make_bundle(3)
    central, _ = R.central_dense_sampling(b, 1, 3, 8, 4)
    ci, cj = b.center_index
    np.testing.assert_array_equal(central.dirs[0], b.dirs[ci, cj])


# -- sphere tracing ------------------------------------------------------------------------

def test_sphere_trace_unit_sphere():
    shape = F.AnalyticShape("sphere", radius=1.0)
    hit, t = R.sphere_trace(Ray(np.array([0, 0, -3.0]), np.array([0, 0, 1.0])),
                            shape.sdf, t_min=0.0, t_max=6.0, eps=1e-6)
    assert hit and abs(t - 2.0) < 1e-4


def test_sphere_trace_miss():
    shape = F.AnalyticShape("sphere", radius=1.0)
    hit, _ = R.sphere_trace(Ray(np.array([2.0, 0, -3.0]), np.array([0, 0, 1.0])),
                            shape.sdf)
    assert not hit


def test_sphere_trace_box():
    shape = F.AnalyticShape("box", half_extents=(0.5, 0.5, 0.5))
    hit, t = R.sphere_trace(Ray(np.array([0, 0, -2.0]), np.array([0, 0, 1.0])),
                            shape.sdf, eps=1e-6)
    assert hit and abs(t - 1.5) < 1e-4


@pytest.mark.parametrize("kind,params", [
    ("sphere", {"radius": 0.6}),
    ("box", {"half_extents": (0.4, 0.5, 0.3)}),
    ("torus", {"radii": (0.5, 0.15)}),
])
def test_sphere_trace_hits_satisfy_surface_tolerance(kind, params):
    shape = F.AnalyticShape(kind, **params)
    rng = np.random.default_rng(13)
    o = rng.normal(size=(60, 3))
    o = 3.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    target = rng.uniform(-0.3, 0.3, size=(60, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cfg = R.TraceConfig(t_min=0.0, t_max=6.0, eps=1e-6)
    hit, t = R.sphere_trace_batch(o, d, shape.sdf, cfg)
    assert hit.sum() > 30
    pts = o[hit] + t[hit, None] * d[hit]
    assert np.abs(shape.sdf(pts)).max() < 1e-6


# -- surface rendering -----------------------------------------------------------------------

def test_surface_render_all_miss(desk_params):
    from raypatch.geometry import Camera, build_bundles
    # camera displaced sideways: near-axial rays pass 5 units from the surface
    pose = np.eye(4)
    pose[:3, 3] = [5.0, 0, -3.0]
    cam = Camera(fx=2000.0, fy=2000.0, cx=16, cy=16, c2w=pose, width=32, height=32)
    img = np.zeros((32, 32, 3))
    (b,) = build_bundles(cam, img, 1, 3, np.random.default_rng(1))
    cfg = R.TraceConfig(t_min=0.5, t_max=5.0, background=(0.1, 0.2, 0.3))
    with Graph():
        res = R.surface_render(b, desk_params, cfg)
    np.testing.assert_allclose(res.color.data, np.tile([0.1, 0.2, 0.3], (9, 1)), atol=1e-12)
    np.testing.assert_array_equal(res.transmittance_final.data, np.ones(9))


def test_surface_render_constant_color_on_hits():
    shape = F.AnalyticShape("sphere", radius=0.5)
    field = F.AnalyticField(shape, albedo=(0.0, 0.0, 0.0), ambient=0.6)
    b = _sphere_bundle()
    cfg = R.TraceConfig(t_min=1.0, t_max=5.0, background=(0, 0, 0))
    with Graph():
        res = R.surface_render(b, field, cfg)
    hit = res.transmittance_final.data == 0
    assert hit.sum() >= 1
    np.testing.assert_allclose(res.color.data[hit], 0.6, atol=1e-9)


def _sphere_bundle():
    from raypatch.geometry import Camera, build_bundles
    pose = np.eye(4)
    pose[:3, 3] = [0, 0, -3.0]
    cam = Camera(fx=120.0, fy=120.0, cx=16, cy=16, c2w=pose, width=32, height=32)
    img = np.zeros((32, 32, 3))
    rng = np.random.default_rng(2)
    while True:
        (b,) = build_bundles(cam, img, 1, 3, rng)
        if abs(b.anchor[0] - 16) < 4 and abs(b.anchor[1] - 16) < 4:
            return b


def test_surface_render_implicit_gradient(desk_params):
    b = _sphere_bundle()
    cfg = R.TraceConfig(t_min=1.0, t_max=5.0, eps=1e-9, max_steps=256)
    w = desk_params.geo_w[3]
    with Graph():
        res = R.surface_render(b, desk_params, cfg)
        hit = np.where(res.transmittance_final.data == 0)[0]
        assert len(hit) > 0
        pixel = res.color[int(hit[0]), 1]
        (gw,) = ad.grad(pixel, [w])
    i, j = np.unravel_index(np.argmax(np.abs(gw.data)), gw.shape)
    analytic = gw.data[i, j]

    eps = 1e-5
    vals = []
    for sign in (+1, -1):
        w.data[i, j] += sign * eps
        with Graph():  # surface mode needs live gradients internally
            r = R.surface_render(b, desk_params, cfg)
            vals.append(r.color.data[int(hit[0]), 1])
        w.data[i, j] -= sign * eps
    fd = (vals[0] - vals[1]) / (2 * eps)
    assert abs(analytic - fd) / max(abs(fd), 1e-8) < 1e-3


# -- full view rendering -----------------------------------------------------------------------

def test_render_view_modes_agree(sphere_field):
    from raypatch.geometry import Camera
    pose = np.eye(4)
    pose[:3, 3] = [0, 0, -3.0]
    cam = Camera(fx=30.0, fy=30.0, cx=12, cy=12, c2w=pose, width=24, height=24)
    dc = R.DensityConfig(alpha=500.0, beta=0.002)
    vol = R.render_view(cam, sphere_field, dc, near=2.0, far=4.0, mode="volume",
                        n_coarse=48, n_fine=32, chunk=128)
    tc = R.TraceConfig(t_min=2.0, t_max=4.0)
    srf = R.render_view(cam, sphere_field, dc, near=2.0, far=4.0, mode="surface", trace=tc)
    solid = (vol["alpha"] > 0.99) & (srf["alpha"] > 0.5)
    assert solid.sum() > 20
    assert np.abs(vol["color"] - srf["color"])[solid].max() < 0.03
    assert np.abs(vol["depth"] - srf["depth"])[solid].max() < 0.02


def test_render_view_rejects_unknown_mode(sphere_field):
    from raypatch.geometry import Camera
    cam = Camera(fx=30.0, fy=30.0, cx=8, cy=8, c2w=np.eye(4), width=16, height=16)
    with pytest.raises(ValueError):
        R.render_view(cam, sphere_field, R.DensityConfig(), 1, 2, mode="hybrid")
