"""Two renderers over the same image formation model.

Forward: sphere tracing of analytic scenes plus hemispherical quadrature of
the diffuse/specular radiance integrals; produces the ground-truth Stokes
images, masks, AoP/normal maps and the per-pixel dominance labels used by the
consistency checks.

Inverse: NeuS-style volumetric Stokes rendering of the grid fields,
differentiable through the tape.  Sample placement (stratified coarse plus
one importance round) is planned outside the tape and treated as constant;
gradients flow through field values only.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import difftape as dt
from . import fields as fd
from .errors import InvalidInputError
from .geometry import Camera
from .pbrdf import (fresnel_reflection, fresnel_transmission, microfacet_d,
                    microfacet_g, point_stokes)
from .polarimetry import PolarizedImage, aop_map
from .scenes import Scene, sdf_normal_analytic

BOUND_RADIUS = 1.0
ALPHA_EPS = 1e-10
ALPHA_MAX = 1.0 - 1e-7
N_QUADRATURE = 512


# ---------------------------------------------------------------------------
# ray / bounding-sphere helpers


def ray_sphere_bounds(origins, dirs, radius: float = BOUND_RADIUS):
    """Entry/exit distances of rays against the bounding sphere.

    Returns (t_near, t_far, valid); invalid rays get t_near >= t_far.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    valid = disc > 0.0
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = np.maximum(-b - root, 0.0)
    t_far = -b + root
    valid = valid & (t_far > t_near)
    return t_near, t_far, valid


def sphere_trace(sdf, origins, dirs, tol: float = 1e-7, max_steps: int = 512,
                 safety: float = 0.9):
    """First zero crossing of an analytic SDF inside the bounding sphere.

    Returns (t, hit).  Overshoots are recovered by bisection, so the final
    |sdf| at hits is far below 1e-6 even for compound shapes.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t0, t1, valid = ray_sphere_bounds(o, d)
    t = t0.copy()
    t_prev = t0.copy()
    active = valid.copy()
    hit = np.zeros(len(o), dtype=bool)
    lo = np.zeros(len(o))
    hi = np.zeros(len(o))
    for _ in range(max_steps):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        p = o[idx] + t[idx, None] * d[idx]
        f = sdf(p)
        conv = np.abs(f) < tol
        hit[idx[conv]] = True
        active[idx[conv]] = False
        crossed = (f < 0.0) & ~conv
        ci = idx[crossed]
        lo[ci] = t_prev[ci]
        hi[ci] = t[ci]
        hit[ci] = True
        active[ci] = False
        go = idx[~conv & ~crossed]
        t_prev[go] = t[go]
        t[go] = t[go] + safety * f[~conv & ~crossed]
        out = go[t[go] > t1[go]]
        active[out] = False
    # bisection polish for rays that crossed the surface
    bis = hi > 0.0
    if np.any(bis):
        bi = np.nonzero(bis)[0]
        a, b2 = lo[bi].copy(), hi[bi].copy()
        for _ in range(60):
            mid = 0.5 * (a + b2)
            fm = sdf(o[bi] + mid[:, None] * d[bi])
            neg = fm < 0.0
            b2 = np.where(neg, mid, b2)
            a = np.where(neg, a, mid)
        t[bi] = 0.5 * (a + b2)
    return t, hit


# ---------------------------------------------------------------------------
# hemispherical quadrature (forward ground truth)


def fibonacci_hemisphere(count: int) -> np.ndarray:
    """Deterministic directions on the local upper hemisphere (z up)."""
    i = np.arange(count) + 0.5
    z = i / count
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def orthonormal_basis(n: np.ndarray):
    """Branchless tangent frame (t1, t2) for unit normals n (..., 3)."""
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    s = np.where(nz >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + nz)
    b = nx * ny * a
    t1 = np.stack([1.0 + s * nx * nx * a, s * b, -s * nx], axis=-1)
    t2 = np.stack([b, s + ny * ny * a, -ny], axis=-1)
    return t1, t2


def shade_forward(scene: Scene, pts, normals, views, cam: Camera,
                  n_quad: int = N_QUADRATURE):
    """Ground-truth Stokes at surface points via hemispherical quadrature.

    pts/normals/views are (P, 3); `views` points from the surface toward the
    camera.  Returns (stokes (P, C, 4), l_d (P, C), l_s (P, C)).

    The diffuse radiance integrates albedo/pi * L(w) cos(th_i) T_i+ over the
    hemisphere: the ideal-depolarizer chain keeps only the total transmitted
    power of the incident side, and the outgoing T_o column is applied by
    point_stokes.  The specular radiance integrates L(w) D G / (4 n.v).
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    v = np.asarray(views, dtype=np.float64)
    mat = scene.material
    local = fibonacci_hemisphere(n_quad)
    z = local[:, 2]
    t_i_plus = fresnel_transmission(z, mat.eta).t_plus
    dz_weight = 2.0 * np.pi / n_quad

    t1, t2 = orthonormal_basis(n)
    omega = (t1[:, None, :] * local[None, :, 0, None]
             + t2[:, None, :] * local[None, :, 1, None]
             + n[:, None, :] * z[None, :, None])
    radiance = scene.environment.eval(omega)  # (P, N, 3)

    l_d = (mat.albedo / np.pi) * dz_weight * np.einsum("pnc,n->pc", radiance, z * t_i_plus)

    mu_o = np.clip(np.sum(n * v, axis=-1), 1e-9, 1.0)
    h = omega + v[:, None, :]
    h = h / np.linalg.norm(h, axis=-1, keepdims=True)
    ndoth = np.clip(np.einsum("pnd,pd->pn", h, n), 0.0, 1.0)
    dterm = microfacet_d(ndoth, mat.roughness)
    gterm = microfacet_g(z[None, :], mu_o[:, None], mat.roughness)
    kernel = dterm * gterm / (4.0 * mu_o[:, None])
    l_s = dz_weight * np.einsum("pnc,pn->pc", radiance, kernel)

    stokes = point_stokes(n, v, l_d, l_s, mat, cam.r)
    return stokes, l_d, l_s


@dataclass
class ViewRender:
    """Everything the forward renderer knows about one view."""

    image: PolarizedImage
    aop: np.ndarray
    aop_valid: np.ndarray
    normals: np.ndarray
    dominance: np.ndarray  # 0 degenerate/miss, 1 diffuse, 2 specular
    l_d: np.ndarray
    l_s: np.ndarray
    depth: np.ndarray


def render_scene(scene: Scene, cam: Camera, n_quad: int = N_QUADRATURE,
                 threads: int = 1) -> ViewRender:
    """Sphere-trace plus shade every pixel of one view."""
    origins, dirs = cam.grid_rays()
    h_img, w_img = dirs.shape[:2]
    flat_o = origins.reshape(-1, 3)
    flat_d = dirs.reshape(-1, 3)

    t, hit = sphere_trace(scene.sdf, flat_o, flat_d)
    stokes = np.zeros((h_img * w_img, 3, 4))
    normals = np.zeros((h_img * w_img, 3))
    l_d = np.zeros((h_img * w_img, 3))
    l_s = np.zeros((h_img * w_img, 3))
    depth = np.zeros(h_img * w_img)

    idx = np.nonzero(hit)[0]
    if idx.size:
        pts = flat_o[idx] + t[idx, None] * flat_d[idx]
        n = sdf_normal_analytic(scene.sdf, pts)
        v = -flat_d[idx]
        facing = np.sum(n * v, axis=-1) > 1e-9
        hit[idx[~facing]] = False
        idx = idx[facing]
        pts, n, v = pts[facing], n[facing], v[facing]
        if idx.size:
            blocks = _split_blocks(len(idx), threads)
            def run(blk):
                s, d_, sp = shade_forward(scene, pts[blk], n[blk], v[blk], cam, n_quad)
                return blk, s, d_, sp
            if threads > 1 and len(blocks) > 1:
                with ThreadPoolExecutor(max_workers=threads) as ex:
                    results = list(ex.map(run, blocks))
            else:
                results = [run(blk) for blk in blocks]
            for blk, s, d_, sp in results:
                stokes[idx[blk]] = s
                l_d[idx[blk]] = d_
                l_s[idx[blk]] = sp
            normals[idx] = n
            depth[idx] = t[idx]

    mask = hit.reshape(h_img, w_img)
    stokes = stokes.reshape(h_img, w_img, 3, 4)
    gray = stokes.sum(axis=2)
    angles, valid = aop_map(gray)
    valid &= mask

    # dominance: which polarized magnitude wins in the channel-summed signal
    t_minus_mag = np.abs(fresnel_transmission(
        np.clip(np.einsum("hwc,hwc->hw", normals.reshape(h_img, w_img, 3),
                          -dirs), 0.0, 1.0), scene.material.eta).t_minus)
    diff_pol = t_minus_mag * l_d.reshape(h_img, w_img, 3).sum(-1)
    spec_pol = t_minus_mag * l_s.reshape(h_img, w_img, 3).sum(-1)
    dominance = np.zeros((h_img, w_img), dtype=np.uint8)
    dominance[valid & (diff_pol >= spec_pol)] = 1
    dominance[valid & (diff_pol < spec_pol)] = 2

    image = PolarizedImage(stokes, mask)
    return ViewRender(image=image, aop=angles, aop_valid=valid,
                      normals=normals.reshape(h_img, w_img, 3),
                      dominance=dominance,
                      l_d=l_d.reshape(h_img, w_img, 3),
                      l_s=l_s.reshape(h_img, w_img, 3),
                      depth=depth.reshape(h_img, w_img))


def _split_blocks(total: int, threads: int):
    parts = max(1, min(threads, total))
    edges = np.linspace(0, total, parts + 1).astype(int)
    return [np.arange(edges[i], edges[i + 1]) for i in range(parts) if edges[i + 1] > edges[i]]


# ---------------------------------------------------------------------------
# NeuS-style sampling and compositing


@dataclass
class RaySampleSet:
    """Samples along one ray with NeuS opacities and transmittances."""

    origin: np.ndarray
    direction: np.ndarray
    t: np.ndarray
    points: np.ndarray = field(default=None)
    sigma: np.ndarray = field(default=None)
    transmittance: np.ndarray = field(default=None)

    @property
    def weights(self):
        if self.sigma is None:
            return np.zeros(0)
        return self.transmittance * self.sigma


def _alphas_np(f: np.ndarray, s: float):
    """NeuS alpha from consecutive SDF samples: max((P_i - P_i+1)/P_i, 0)."""
    cdf = expit(s * f)
    raw = (cdf[..., :-1] - cdf[..., 1:]) / (cdf[..., :-1] + ALPHA_EPS)
    return np.clip(raw, 0.0, ALPHA_MAX)


def _transmittance_np(alpha: np.ndarray):
    ones = np.ones(alpha.shape[:-1] + (1,))
    return np.cumprod(np.concatenate([ones, 1.0 - alpha[..., :-1]], axis=-1), axis=-1)


def plan_ray_samples(fs: fd.FieldSet, origins, dirs, n_coarse: int = 64,
                     n_fine: int = 32, rng: np.random.Generator = None):
    """Stratified coarse samples plus one importance round; returns t (B, S).

    Rays must intersect the bounding sphere (callers prefilter).  With no rng
    the strata midpoints are used, making placement deterministic.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t0, t1, valid = ray_sphere_bounds(o, d)
    if not np.all(valid):
        raise InvalidInputError("plan_ray_samples needs rays hitting the bounding sphere")
    nb = len(o)
    u = (rng.random((nb, n_coarse)) if rng is not None
         else np.full((nb, n_coarse), 0.5))
    ts = t0[:, None] + (t1 - t0)[:, None] * (np.arange(n_coarse) + u) / n_coarse
    if n_fine <= 0:
        return np.sort(ts, axis=-1)
    f = fd.trilinear_np(fs.sdf, o[:, None, :] + ts[..., None] * d[:, None, :], fs.n)
    alpha = _alphas_np(f, fs.s_sharp)
    w = _transmittance_np(alpha) * alpha + 1e-5
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((nb, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    uf = (rng.random((nb, n_fine)) if rng is not None
          else np.tile((np.arange(n_fine) + 0.5) / n_fine, (nb, 1)))
    # vectorized inverse-CDF: offset each ray's cdf/u into its own unit slot
    offs = np.arange(nb)[:, None].astype(np.float64)
    flat_cdf = (cdf + 2.0 * offs).ravel()
    flat_u = (uf + 2.0 * offs).ravel()
    j = np.searchsorted(flat_cdf, flat_u, side="right") - 1
    j = np.clip(j - np.repeat(np.arange(nb), n_fine) * (n_coarse + 1), 0, n_coarse - 1)
    rows = np.repeat(np.arange(nb), n_fine)
    c0 = cdf[rows, j]
    c1 = cdf[rows, j + 1]
    span = c1 - c0
    frac = np.where(span > 0, (uf.ravel() - c0) / np.where(span > 0, span, 1.0), 0.5)
    left = ts[rows, j]
    right = np.where(j + 1 < n_coarse, ts[rows, np.minimum(j + 1, n_coarse - 1)], t1[rows])
    fine = (left + frac * (right - left)).reshape(nb, n_fine)
    return np.sort(np.concatenate([ts, fine], axis=-1), axis=-1)


def neus_weights(fs: fd.FieldSet, origin, direction, n_coarse: int = 64,
                 n_fine: int = 32, rng: np.random.Generator = None) -> RaySampleSet:
    """Numpy evaluation of the NeuS sample set for one ray (empty on miss)."""
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    _, _, valid = ray_sphere_bounds(o[None], d[None])
    if not valid[0]:
        return RaySampleSet(o, d, np.zeros(0), np.zeros((0, 3)),
                            np.zeros(0), np.zeros(0))
    ts = plan_ray_samples(fs, o[None], d[None], n_coarse, n_fine, rng)[0]
    pts = o[None] + ts[:, None] * d[None]
    f = fd.trilinear_np(fs.sdf, pts, fs.n)
    alpha = _alphas_np(f[None], fs.s_sharp)[0]
    trans = _transmittance_np(alpha[None])[0]
    return RaySampleSet(o, d, ts, pts, alpha, trans)


# ---------------------------------------------------------------------------
# differentiable volumetric Stokes rendering


def volume_stokes_vars(fv: fd.FieldVars, origins, dirs, ts, r1, r2,
                       shade_sel: np.ndarray = None, shade_valid: np.ndarray = None):
    """Tape evaluation of the volumetric Stokes render for a ray batch.

    origins/dirs (B, 3) and sample depths ts (B, S) are constants; r1/r2 are
    the per-ray camera rotation rows.  `shade_sel` optionally restricts the
    shading evaluation to a flat subset of the B*(S-1) contribution slots
    (planned from a numpy weights pass); `shade_valid` marks padding entries
    (weight forced to 0) that keep buffer shapes in repeatable buckets.
    Opacity always uses all samples.  Returns a dict of Vars: Stokes
    components s0/s1/s2 (B, C), opacity (B,), per-sample weights (B, S-1),
    and the shaded-sample gradient norms.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    ts = np.asarray(ts, dtype=np.float64)
    pts = o[:, None, :] + ts[..., None] * d[:, None, :]
    nb, ns = ts.shape[0], ts.shape[1] - 1

    f = fv.sample_sdf(pts)  # (B, S)
    s_sharp = fv.s_sharp()
    phi = dt.sigmoid(dt.mul(f, s_sharp))
    phi_i = dt.slice_last(phi, 0, ns)
    phi_j = dt.slice_last(phi, 1, ns + 1)
    raw = dt.div(dt.sub(phi_i, phi_j), dt.add(phi_i, ALPHA_EPS))
    alpha = dt.minimum(dt.maximum(raw, 0.0), ALPHA_MAX)
    log_t = dt.log(dt.sub(1.0, alpha, tape=alpha.tape))
    trans = dt.exp(dt.shift_right_last(dt.cumsum_last(log_t)))
    weights = dt.mul(trans, alpha)
    opacity = dt.vsum(weights, axis=-1)

    if shade_sel is None:
        shade_sel = np.arange(nb * ns)
    ray_ids = shade_sel // ns
    sp = pts[:, :ns, :].reshape(-1, 3)[shade_sel]  # (K, 3)
    dx = d[ray_ids, 0]
    dy = d[ray_ids, 1]
    dz = d[ray_ids, 2]

    corners = fv._corners(sp)
    gx, gy, gz = fv.sdf_gradient(sp, corners)
    g2 = gx * gx + gy * gy + gz * gz
    ok = (g2.value > 1e-16).astype(np.float64)
    if shade_valid is not None:
        ok = ok * shade_valid
    gnorm = dt.sqrt(g2 + 1e-20)
    inv = dt.div(1.0, gnorm, tape=gnorm.tape)
    # degenerate-gradient samples fall back to the ray direction, weight 0
    nx = gx * inv * ok + dx * (1.0 - ok)
    ny = gy * inv * ok + dy * (1.0 - ok)
    nz = gz * inv * ok + dz * (1.0 - ok)

    w_sel = dt.mul(dt.gather(dt.reshape(weights, (nb * ns,)), shade_sel), ok)

    nd = nx * dx + ny * dy + nz * dz
    cos_o = dt.clamp(dt.neg(nd), 0.0, 1.0)

    # reflection of the camera ray for the specular lobe
    rx = dx - 2.0 * nd * nx
    ry = dy - 2.0 * nd * ny
    rz = dz - 2.0 * nd * nz

    rough = fv.sample_rough(sp, corners)
    l_s = dt.maximum(fv.eval_env(rx, ry, rz, rough), 0.0)
    l_d = dt.maximum(fv.sample_diffuse(sp, corners), 0.0)

    r_plus, r_minus = _fresnel_vars(cos_o, fv.fs.eta)
    t_plus = 1.0 - r_plus  # intensity convention: T = 1 - R per component

    a = nx * r1[ray_ids, 0] + ny * r1[ray_ids, 1] + nz * r1[ray_ids, 2]
    b = nx * r2[ray_ids, 0] + ny * r2[ray_ids, 1] + nz * r2[ray_ids, 2]
    denom = a * a + b * b + 1e-12
    c2 = dt.div(a * a - b * b, denom)
    s2 = dt.div(2.0 * a * b, denom)

    s0_pt = l_d * dt.expand_last(t_plus) + l_s * dt.expand_last(r_plus)
    pol = dt.expand_last(r_minus) * (l_s - l_d)  # T- = -R- folds the signs
    s1_pt = pol * dt.expand_last(c2)
    s2_pt = dt.neg(pol * dt.expand_last(s2))

    w_exp = dt.expand_last(w_sel)
    out = {
        "s0": dt.scatter_sum(dt.mul(w_exp, s0_pt), ray_ids, nb),
        "s1": dt.scatter_sum(dt.mul(w_exp, s1_pt), ray_ids, nb),
        "s2": dt.scatter_sum(dt.mul(w_exp, s2_pt), ray_ids, nb),
        "opacity": opacity,
        "weights": weights,
        "grad_norm": gnorm,
        "alpha": alpha,
        "f": f,
    }
    return out


def _fresnel_vars(cos_o: dt.Var, eta: float):
    """Tape twin of the Fresnel coefficient pair (R+, R-)."""
    c = cos_o
    sin2 = 1.0 - c * c
    ct = dt.mul(dt.sqrt(dt.sub(eta * eta + 0.0, sin2, tape=c.tape)), 1.0 / eta)
    rs = dt.div(c - eta * ct, c + eta * ct)
    rp = dt.div(eta * c - ct, eta * c + ct)
    r_s = rs * rs
    r_p = rp * rp
    return 0.5 * (r_s + r_p), 0.5 * (r_s - r_p)


def volume_render_stokes(fs: fd.FieldSet, origins, dirs, cam: Camera,
                         ts=None, rng: np.random.Generator = None,
                         n_coarse: int = 64, n_fine: int = 32):
    """Convenience numpy wrapper: renders Stokes (B, C, 4) plus opacity (B,)."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    if ts is None:
        ts = plan_ray_samples(fs, o, d, n_coarse, n_fine, rng)
    tape = dt.Tape()
    fv = fs.register(tape)
    r1 = np.broadcast_to(cam.r1, o.shape)
    r2 = np.broadcast_to(cam.r2, o.shape)
    out = volume_stokes_vars(fv, o, d, ts, r1, r2)
    stokes = np.stack([out["s0"].value, out["s1"].value, out["s2"].value,
                       np.zeros_like(out["s0"].value)], axis=-1)
    return stokes, out["opacity"].value


# ---------------------------------------------------------------------------
# grid-SDF ray intersection (non-differentiable)


def ray_surface_intersection(fs: fd.FieldSet, origins, dirs,
                             n_steps: int = 192, refine: int = 16):
    """First zero crossing of the interpolated SDF along each ray.

    Fixed-step search plus secant refinement; |sdf| < 1e-4 at reported hits.
    Returns (points (B, 3), hit (B,)).
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t0, t1, valid = ray_sphere_bounds(o, d)
    nb = len(o)
    pts_out = np.zeros((nb, 3))
    hit = np.zeros(nb, dtype=bool)
    if not np.any(valid):
        return pts_out, hit
    steps = np.linspace(0.0, 1.0, n_steps)
    ts = t0[:, None] + (t1 - t0)[:, None] * steps
    f = fd.trilinear_np(fs.sdf, o[:, None, :] + ts[..., None] * d[:, None, :], fs.n)
    neg = (f <= 0.0) & valid[:, None]
    first = np.argmax(neg, axis=1)
    found = neg[np.arange(nb), first] & (first > 0)
    if not np.any(found):
        return pts_out, hit
    fi = np.nonzero(found)[0]
    ta = ts[fi, first[fi] - 1]
    tb = ts[fi, first[fi]]
    fa = f[fi, first[fi] - 1]
    fb = f[fi, first[fi]]
    for _ in range(refine):
        tm = ta - fa * (tb - ta) / np.where(fb - fa == 0.0, 1.0, fb - fa)
        tm = np.clip(tm, np.minimum(ta, tb), np.maximum(ta, tb))
        fm = fd.trilinear_np(fs.sdf, o[fi] + tm[:, None] * d[fi], fs.n)
        pos = fm > 0.0
        ta = np.where(pos, tm, ta)
        fa = np.where(pos, fm, fa)
        tb = np.where(pos, tb, tm)
        fb = np.where(pos, fb, fm)
    t_hit = tb
    pts_out[fi] = o[fi] + t_hit[:, None] * d[fi]
    hit[fi] = True
    return pts_out, hit


def surface_visibility(fs: fd.FieldSet, cam: Camera, points,
                       depth_tol: float = 0.01):
    """Occlusion test: re-trace from the camera and compare hit depth to the
    point's distance within `depth_tol` relative tolerance."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    center = cam.center
    delta = pts - center
    dist = np.linalg.norm(delta, axis=-1)
    dirs = delta / dist[:, None]
    origins = np.broadcast_to(center, pts.shape)
    hit_pts, hit = ray_surface_intersection(fs, origins, dirs, n_steps=96)
    t_hit = np.linalg.norm(hit_pts - center, axis=-1)
    return hit & (np.abs(t_hit - dist) <= depth_tol * dist)
