import numpy as np
import pytest

from polarsdf import difftape as dt
from polarsdf import fields as fd
from polarsdf import pbrdf
from polarsdf import polarimetry as pol
from polarsdf import render as rd
from polarsdf import scenes
from polarsdf.errors import InvalidInputError
from polarsdf.geometry import look_at_camera, tangent_rows

from conftest import sphere_scene_spec


# ---------------------------------------------------------------------------
# analytic scenes


def test_primitive_sdf_values():
    sphere = scenes.sdf_from_spec({"kind": "sphere", "radius": 0.5})
    assert np.isclose(sphere(np.zeros((1, 3)))[0], -0.5)
    assert np.isclose(sphere(np.array([[1.0, 0, 0]]))[0], 0.5)
    torus = scenes.sdf_from_spec({"kind": "torus", "major": 0.3, "minor": 0.1})
    assert np.isclose(torus(np.array([[0.3, 0, 0]]))[0], -0.1)
    assert np.isclose(torus(np.array([[0.0, 0, 0]]))[0], 0.2)
    box = scenes.sdf_from_spec({"kind": "rounded_box", "half_extents": [0.2, 0.2, 0.2],
                                "radius": 0.05})
    assert np.isclose(box(np.array([[0.5, 0, 0]]))[0], 0.25)
    empty = scenes.sdf_from_spec({"kind": "empty"})
    assert np.all(empty(np.zeros((4, 3))) == 1.0)
    with pytest.raises(InvalidInputError):
        scenes.sdf_from_spec({"kind": "noodle"})


def test_smooth_union_bounds_min():
    a = scenes.sdf_from_spec({"kind": "sphere", "radius": 0.3, "center": [-0.2, 0, 0]})
    b = scenes.sdf_from_spec({"kind": "sphere", "radius": 0.3, "center": [0.2, 0, 0]})
    u = scenes.sdf_from_spec({"kind": "smooth_union", "k": 0.05, "parts": [
        {"kind": "sphere", "radius": 0.3, "center": [-0.2, 0, 0]},
        {"kind": "sphere", "radius": 0.3, "center": [0.2, 0, 0]}]})
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (400, 3))
    assert np.all(u(pts) <= np.minimum(a(pts), b(pts)) + 1e-12)


def test_scene_gradient_matches_analytic_sphere():
    sdf = scenes.sdf_from_spec({"kind": "sphere", "radius": 0.4})
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.8, 0.8, (100, 3))
    pts = pts[np.linalg.norm(pts, axis=-1) > 0.05]
    n = scenes.sdf_normal_analytic(sdf, pts)
    ref = pts / np.linalg.norm(pts, axis=-1, keepdims=True)
    assert np.max(np.abs(n - ref)) < 1e-7


def test_gaussian_lobe_environment_nonnegative():
    env = scenes.environment_from_spec({
        "kind": "lobes", "ambient": [0.1, 0.2, 0.3],
        "lobes": [{"axis": [0, 0, 1], "sharpness": 5.0, "color": [1.0, 0.5, 0.2]}]})
    rng = np.random.default_rng(2)
    dirs = rng.normal(size=(100, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    vals = env.eval(dirs)
    assert np.all(vals >= 0.0)
    peak = env.eval(np.array([[0.0, 0, 1.0]]))
    assert np.all(vals[:, 0] <= peak[0, 0] + 1e-12)


# ---------------------------------------------------------------------------
# sphere tracing


def test_sphere_trace_center_axis():
    sdf = scenes.sdf_from_spec({"kind": "sphere", "radius": 0.5})
    o = np.array([[0.0, 0.0, -2.0]])
    d = np.array([[0.0, 0.0, 1.0]])
    t, hit = rd.sphere_trace(sdf, o, d)
    assert hit[0]
    assert np.isclose(t[0], 1.5, atol=1e-6)
    p = o[0] + t[0] * d[0]
    n = scenes.sdf_normal_analytic(sdf, p[None])[0]
    assert np.allclose(n, -d[0], atol=1e-6)


def test_sphere_trace_tangent_ray_misses():
    sdf = scenes.sdf_from_spec({"kind": "sphere", "radius": 0.5})
    o = np.array([[0.5001, 0.0, -2.0]])
    d = np.array([[0.0, 0.0, 1.0]])
    _, hit = rd.sphere_trace(sdf, o, d)
    assert not hit[0]


def test_sphere_trace_hits_are_on_surface():
    sdf = scenes.sdf_from_spec({"kind": "smooth_union", "k": 0.04, "parts": [
        {"kind": "torus", "major": 0.32, "minor": 0.14},
        {"kind": "sphere", "radius": 0.1, "center": [0.38, 0.0, 0.1]}]})
    cam = look_at_camera([1.8, 1.2, 1.0], fov_deg=35, width=24, height=24)
    o, d = cam.grid_rays()
    t, hit = rd.sphere_trace(sdf, o.reshape(-1, 3), d.reshape(-1, 3))
    assert hit.sum() > 50
    pts = o.reshape(-1, 3)[hit] + t[hit, None] * d.reshape(-1, 3)[hit]
    assert np.max(np.abs(sdf(pts))) < 1e-6


# ---------------------------------------------------------------------------
# forward shading


def _simple_scene(roughness=0.2, lobes=True):
    spec = sphere_scene_spec(image_size=24, roughness=roughness)
    if not lobes:
        spec["environment"] = {"kind": "lobes", "ambient": [0.0, 0.0, 0.0], "lobes": []}
    return scenes.Scene.from_spec(spec)


def test_shade_forward_zero_environment():
    scene = _simple_scene(lobes=False)
    cam = scene.cameras[0]
    pts = np.array([[0.0, 0.0, 0.5]])
    n = np.array([[0.0, 0.0, 1.0]])
    v = (cam.center - pts)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    stokes, l_d, l_s = rd.shade_forward(scene, pts, n, v, cam, n_quad=64)
    assert np.allclose(stokes, 0.0)
    assert np.allclose(l_d, 0.0) and np.allclose(l_s, 0.0)


def test_shade_forward_frontal_unpolarized():
    spec = sphere_scene_spec(image_size=24, roughness=0.05)
    spec["environment"] = {"kind": "lobes", "ambient": [1.0, 1.0, 1.0], "lobes": []}
    spec["material"]["albedo"] = [1.0, 1.0, 1.0]
    scene = scenes.Scene.from_spec(spec)
    cam = scene.cameras[0]
    # frontal geometry: n points straight at the camera
    n = cam.center / np.linalg.norm(cam.center)
    pts = (0.5 * n)[None]
    stokes, _, _ = rd.shade_forward(scene, pts, n[None], n[None], cam, n_quad=256)
    assert np.max(np.abs(stokes[..., 1:3])) < 1e-9


def test_shade_forward_linear_in_environment():
    spec = sphere_scene_spec(image_size=24)
    scene1 = scenes.Scene.from_spec(spec)
    spec2 = {**spec, "environment": {
        "kind": "lobes",
        "ambient": [0.6, 0.6, 0.64],
        "lobes": [{"axis": [0.5, 0.5, 0.7], "sharpness": 6.0, "color": [2.4, 2.2, 1.8]},
                  {"axis": [-0.6, 0.2, 0.5], "sharpness": 10.0, "color": [1.0, 1.2, 1.6]}]}}
    scene2 = scenes.Scene.from_spec(spec2)
    cam = scene1.cameras[0]
    rng = np.random.default_rng(3)
    n = rng.normal(size=(5, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    pts = 0.5 * n
    v = cam.center - pts
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    keep = np.sum(n * v, axis=-1) > 0.1
    s1, _, _ = rd.shade_forward(scene1, pts[keep], n[keep], v[keep], cam, n_quad=128)
    s2, _, _ = rd.shade_forward(scene2, pts[keep], n[keep], v[keep], cam, n_quad=128)
    assert np.allclose(s2, 2.0 * s1, rtol=1e-12, atol=1e-12)


def test_render_scene_empty_mask():
    spec = sphere_scene_spec(image_size=16)
    spec["primitive"] = {"kind": "empty"}
    scene = scenes.Scene.from_spec(spec)
    view = rd.render_scene(scene, scene.cameras[0], n_quad=32)
    assert not view.image.mask.any()
    assert not view.aop_valid.any()


def test_render_scene_cornerstone_consistency(small_sphere_data):
    """GT AoP and GT normal satisfy the tangent residual with the stored
    dominance branch at every non-degenerate pixel."""
    ds, scene, renders = small_sphere_data
    for cam, view in zip(scene.cameras, renders):
        sel = view.aop_valid
        n = view.normals[sel]
        phi = view.aop[sel]
        dom = view.dominance[sel]
        t_rows, h_rows = tangent_rows(np.broadcast_to(cam.r1, n.shape),
                                      np.broadcast_to(cam.r2, n.shape), phi)
        res = np.where(dom == 1,
                       np.abs(np.sum(n * t_rows, axis=-1)),
                       np.abs(np.sum(n * h_rows, axis=-1)))
        assert res.max() < 1e-6


def test_render_scene_stokes_intensity_round_trip(small_sphere_data):
    ds, scene, renders = small_sphere_data
    view = renders[0]
    s = view.image.stokes[view.image.mask]
    back = pol.stokes_from_intensities(*pol.intensities_from_stokes(s))
    assert np.max(np.abs(back - s)) < 1e-12


def test_render_scene_threads_deterministic(small_sphere_data):
    ds, scene, renders = small_sphere_data
    again = rd.render_scene(scene, scene.cameras[0], n_quad=128, threads=4)
    assert np.array_equal(again.image.stokes, renders[0].image.stokes)
    assert np.array_equal(again.aop, renders[0].aop)


# ---------------------------------------------------------------------------
# NeuS sampling and compositing


def test_neus_weights_miss_and_far():
    fs = fd.FieldSet.create(n=32, init_radius=0.4, s_init=64.0)
    # ray that misses the bounding sphere entirely -> empty set
    rs = rd.neus_weights(fs, np.array([0.0, 2.0, -3.0]), np.array([0.0, 0.0, 1.0]))
    assert rs.t.size == 0 and rs.weights.size == 0
    # ray inside the bounding sphere but always far from the surface
    rs = rd.neus_weights(fs, np.array([0.0, 0.8, -3.0]),
                         np.array([0.0, 0.0, 1.0]))
    assert np.all(rs.sigma < 1e-6)
    assert rs.weights.sum() < 1e-4


def test_neus_weights_center_ray_opaque():
    fs = fd.FieldSet.create(n=64, init_radius=0.5, s_init=64.0)
    rs = rd.neus_weights(fs, np.array([0.0, 0.0, -2.5]), np.array([0.0, 0.0, 1.0]))
    assert rs.weights.sum() > 0.99


def test_neus_weights_match_1d_oracle():
    """Alphas from the implementation equal a direct 1D evaluation of the
    NeuS formula on the same SDF samples."""
    from scipy.special import expit
    fs = fd.FieldSet.create(n=32, init_radius=0.45, s_init=32.0)
    o = np.array([0.1, -0.2, -2.0])
    d = np.array([0.0, 0.1, 1.0])
    d = d / np.linalg.norm(d)
    rs = rd.neus_weights(fs, o, d, n_coarse=40, n_fine=16)
    f = fd.sample_sdf(fs, rs.points)
    cdf = expit(fs.s_sharp * f)
    alpha_ref = np.clip((cdf[:-1] - cdf[1:]) / (cdf[:-1] + 1e-10), 0.0, 1.0 - 1e-7)
    assert np.allclose(rs.sigma, alpha_ref, atol=1e-12)
    w_ref = np.cumprod(np.concatenate([[1.0], 1.0 - alpha_ref[:-1]])) * alpha_ref
    assert np.allclose(rs.weights, w_ref, atol=1e-12)
    assert 0.0 <= rs.weights.sum() <= 1.0 + 1e-9


def test_neus_weights_concentrate_with_sharpness():
    fs = fd.FieldSet.create(n=64, init_radius=0.5, s_init=512.0)
    o = np.array([0.0, 0.0, -2.5])
    d = np.array([0.0, 0.0, 1.0])
    rs = rd.neus_weights(fs, o, d, n_coarse=64, n_fine=32)
    spacing = np.diff(rs.t).max()
    t_star = 2.0  # true crossing along this ray
    w = rs.weights
    peak = np.argmax(w)
    assert abs(rs.t[peak] - t_star) < 2 * spacing
    # nearly all mass within two spacings of the crossing
    near = np.abs(rs.t[:-1] - t_star) < 2 * spacing
    assert w[near].sum() / w.sum() > 0.95


def test_weight_sums_bounded_random_fields():
    rng = np.random.default_rng(4)
    fs = fd.FieldSet.create(n=16, init_radius=0.4)
    fs.sdf += rng.normal(scale=0.2, size=fs.sdf.shape)
    for seed in range(5):
        r = np.random.default_rng(seed)
        d = r.normal(size=3)
        d /= np.linalg.norm(d)
        o = -2.5 * d + 0.1 * r.normal(size=3)
        rs = rd.neus_weights(fs, o, d, rng=r)
        if rs.t.size:
            assert -1e-9 <= rs.weights.sum() <= 1.0 + 1e-9


def test_volume_render_single_opaque_sample_matches_point_stokes():
    fs = fd.FieldSet.create(n=64, init_radius=0.5, s_init=2048.0)
    rng = np.random.default_rng(5)
    fs.diffuse[:] = rng.uniform(0.1, 0.5, fs.diffuse.shape)
    fs.env_sh[:] = 0.0
    fs.env_sh[0] = 0.8
    cam = look_at_camera([0.0, 0.0, -2.5], fov_deg=20, width=8, height=8)
    o = np.array([[0.0, 0.0, -2.5]])
    d = np.array([[0.0, 0.0, 1.0]])
    stokes, opac = rd.volume_render_stokes(fs, o, d, cam)
    assert opac[0] > 1.0 - 1e-4
    # reference: point shading at the crossing with the same field values
    x = np.array([[0.0, 0.0, -0.5]])
    n = fd.sdf_normal(fs, x)
    l_d = np.maximum(fd.sample_diffuse(fs, x), 0.0)
    refl = d[0] - 2 * (n[0] @ d[0]) * n[0]
    l_s = np.maximum(fd.eval_env(fs, refl[None], fd.sample_rough(fs, x)), 0.0)
    mat = pbrdf.Material([1, 1, 1], float(fd.sample_rough(fs, x)[0]), fs.eta)
    ref = pbrdf.point_stokes(n[0], -d[0], l_d[0], l_s[0], mat, cam.r)
    assert np.allclose(stokes[0], ref, atol=1e-3 * np.abs(ref).max())


def test_volume_render_zero_opacity_zero_stokes():
    fs = fd.FieldSet.create(n=16, init_radius=0.3, s_init=128.0)
    cam = look_at_camera([0.0, 0.0, -2.5], fov_deg=20, width=8, height=8)
    o = np.array([[0.0, 0.9, -2.5]])
    d = np.array([[0.0, 0.0, 1.0]])
    stokes, opac = rd.volume_render_stokes(fs, o, d, cam)
    assert opac[0] < 1e-6
    assert np.max(np.abs(stokes)) < 1e-6


def test_volume_render_linear_in_radiance():
    fs = fd.FieldSet.create(n=32, init_radius=0.45, s_init=64.0)
    rng = np.random.default_rng(6)
    fs.diffuse[:] = rng.uniform(0.05, 0.4, fs.diffuse.shape)
    fs.env_sh[:] = 0.0
    fs.env_sh[0] = 1.0
    fs.env_sh[2] = 0.2
    cam = look_at_camera([0.2, -0.3, -2.4], fov_deg=25, width=8, height=8)
    o, d = cam.grid_rays()
    o = o.reshape(-1, 3)[18:30]
    d = d.reshape(-1, 3)[18:30]
    ts = rd.plan_ray_samples(fs, o, d, 48, 0)
    s1, _ = rd.volume_render_stokes(fs, o, d, cam, ts=ts)
    fs2 = fd.FieldSet.create(n=32, init_radius=0.45, s_init=64.0)
    fs2.diffuse = 2.0 * fs.diffuse
    fs2.env_sh = 2.0 * fs.env_sh
    fs2.rough_raw = fs.rough_raw
    fs2.sdf = fs.sdf
    s2, _ = rd.volume_render_stokes(fs2, o, d, cam, ts=ts)
    assert np.allclose(s2, 2.0 * s1, atol=1e-9)


def test_volume_render_gradients_micro_fixture():
    fs = fd.FieldSet.create(n=4, init_radius=0.7, s_init=10.0)
    rng = np.random.default_rng(7)
    fs.sdf += rng.normal(scale=0.01, size=fs.sdf.shape)
    fs.env_sh += rng.normal(scale=0.05, size=fs.env_sh.shape)
    cam = look_at_camera([0.0, 0.1, -2.5], fov_deg=25, width=2, height=2)
    o, d = cam.grid_rays()
    o = o.reshape(-1, 3)
    d = d.reshape(-1, 3)
    ts = rd.plan_ray_samples(fs, o, d, 10, 0)
    r1 = np.broadcast_to(cam.r1, o.shape)
    r2 = np.broadcast_to(cam.r2, o.shape)

    def f(tape, params):
        fv = fd.FieldVars(fs, params)
        out = rd.volume_stokes_vars(fv, o, d, ts, r1, r2)
        return dt.add(dt.vsum(dt.absolute(out["s0"])),
                      dt.add(dt.vsum(dt.absolute(out["s1"])), dt.vsum(out["opacity"])))

    rep = dt.gradient_check(f, fs.params(), h=5e-5, tol=1e-4)
    assert rep.passed, str(rep)


# ---------------------------------------------------------------------------
# grid-SDF intersection and visibility


def test_ray_surface_intersection_sphere_grid():
    fs = fd.FieldSet.create(n=64, init_radius=0.5)
    cam = look_at_camera([0.0, 0.0, -2.5], fov_deg=25, width=16, height=16)
    o, d = cam.grid_rays()
    pts, hit = rd.ray_surface_intersection(fs, o.reshape(-1, 3), d.reshape(-1, 3))
    assert hit.sum() > 30
    f = fd.sample_sdf(fs, pts[hit])
    assert np.max(np.abs(f)) < 1e-4
    assert np.allclose(np.linalg.norm(pts[hit], axis=-1), 0.5, atol=0.02)


def test_ray_surface_intersection_miss_is_value():
    fs = fd.FieldSet.create(n=32, init_radius=0.3)
    pts, hit = rd.ray_surface_intersection(fs, np.array([[0.0, 0.9, -2.0]]),
                                           np.array([[0.0, 0.0, 1.0]]))
    assert not hit[0]


def test_surface_visibility_occlusion():
    fs = fd.FieldSet.create(n=64, init_radius=0.5)
    cam = look_at_camera([0.0, 0.0, -2.5], fov_deg=30, width=16, height=16)
    front = np.array([[0.0, 0.0, -0.5]])  # facing the camera
    back = np.array([[0.0, 0.0, 0.5]])    # hidden behind the sphere
    assert rd.surface_visibility(fs, cam, front)[0]
    assert not rd.surface_visibility(fs, cam, back)[0]
