"""Losses, total objective, ray batching and the Adam training loop.

Each iteration has two phases.  The *plan* phase (pure numpy, seeded per
iteration) picks pixels, places ray samples via one importance round, traces
surface points for the azimuth term and collects their tangent rows across
views.  The *evaluate* phase replays the plan on a fresh tape; gradients flow
through field values only, never through sample placement or intersection
positions.  This split is also what makes the finite-difference gradient gate
well defined.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict, fields as dc_fields

import numpy as np

from . import difftape as dt
from . import fields as fd
from . import render as rd
from .errors import InvalidInputError, NumericalFailure
from .geometry import tangent_rows

EIK_EPS = 1e-12
BCE_CLIP = 1e-6


@dataclass
class LossWeights:
    lambda_g: float = 0.1
    lambda_m: float = 0.1
    lambda_e: float = 0.1

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not np.isfinite(val) or val < 0.0:
                raise InvalidInputError(f"{name} must be finite and nonnegative")


@dataclass
class TrainConfig:
    iterations: int = 3000
    rays_per_batch: int = 512
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grid_resolution: int = 64
    sh_degree: int = 4
    n_coarse: int = 48
    n_fine: int = 24
    geo_points: int = 256
    eik_points: int = 512
    bg_fraction: float = 0.25
    init_radius: float = 0.5
    s_sharp_init: float = 16.0
    s_sharp_max: float = 2048.0
    s_sharp_schedule: str = "learned"  # "learned" or "exp"
    s_sharp_final: float = 512.0
    stack_both: bool = False
    disable_lp: bool = False
    disable_lg: bool = False
    lr_warmup: int = 100
    lr_min_factor: float = 0.02
    shade_weight_min: float = 1e-5
    grad_clip: float = 10.0
    checkpoint_every: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("iterations",):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")
        for name in ("rays_per_batch", "grid_resolution", "n_coarse", "geo_points"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if not 0.0 <= self.bg_fraction < 1.0:
            raise InvalidInputError("bg_fraction must lie in [0, 1)")
        if self.s_sharp_schedule not in ("learned", "exp"):
            raise InvalidInputError("s_sharp_schedule must be 'learned' or 'exp'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss terms (tape level, unit-testable in isolation)


def loss_photometric(pred: dict, obs_s0, obs_s1, obs_s2) -> dt.Var:
    """Mean over rays of the L1 distance summed over Stokes components and
    color channels."""
    nb = pred["s0"].value.shape[0]
    if nb == 0:
        raise InvalidInputError("empty photometric batch")
    total = dt.vsum(dt.absolute(dt.sub(pred["s0"], obs_s0)))
    total = dt.add(total, dt.vsum(dt.absolute(dt.sub(pred["s1"], obs_s1))))
    total = dt.add(total, dt.vsum(dt.absolute(dt.sub(pred["s2"], obs_s2))))
    return dt.mul(total, 1.0 / nb)


def loss_geometric(nx, ny, nz, rows_t, rows_h, point_idx, n_points: int,
                   stack_both: bool = False) -> dt.Var:
    """Mean over surface points of ||T(x) n(x)||^2.

    nx/ny/nz are unit-normal component Vars (P,); rows_t/rows_h are the
    tangent and pseudo-tangent rows (Q, 3) with point_idx (Q,) mapping rows to
    points.  Unknown dominance uses min-selection between the two branches per
    observation; stack_both reproduces literal stacking instead.  An empty
    system contributes 0 (with a warning) rather than an error.
    """
    if n_points == 0 or len(point_idx) == 0:
        import warnings
        warnings.warn("geometric loss over an empty tangent system contributes 0")
        return None
    gx = dt.gather(nx, point_idx)
    gy = dt.gather(ny, point_idx)
    gz = dt.gather(nz, point_idx)
    ra = gx * rows_t[:, 0] + gy * rows_t[:, 1] + gz * rows_t[:, 2]
    rb = gx * rows_h[:, 0] + gy * rows_h[:, 1] + gz * rows_h[:, 2]
    ra2 = ra * ra
    rb2 = rb * rb
    per_row = dt.add(ra2, rb2) if stack_both else dt.minimum(ra2, rb2)
    return dt.mul(dt.vsum(per_row), 1.0 / n_points)


def loss_mask(opacity: dt.Var, mask_targets: np.ndarray) -> dt.Var:
    """Mean binary cross entropy between accumulated opacity and the mask.

    Opacity is squashed linearly into [BCE_CLIP, 1 - BCE_CLIP]: a hard clamp
    would zero the gradient on confidently-wrong rays (opacity ~ 1 where the
    mask is 0), which is exactly where the mask term must keep carving.
    """
    o = dt.add(dt.mul(opacity, 1.0 - 2.0 * BCE_CLIP), BCE_CLIP)
    m = np.asarray(mask_targets, dtype=np.float64)
    bce = dt.neg(dt.add(dt.mul(dt.log(o), m), dt.mul(dt.log(dt.sub(1.0, o, tape=o.tape)), 1.0 - m)))
    return dt.vmean(bce)


def loss_eikonal(gx: dt.Var, gy: dt.Var, gz: dt.Var) -> dt.Var:
    """Mean squared deviation of the SDF gradient norm from 1."""
    gn = dt.sqrt(gx * gx + gy * gy + gz * gz + EIK_EPS)
    dev = dt.sub(gn, 1.0)
    return dt.vmean(dev * dev)


def total_loss(parts: dict, weights: LossWeights, disable_lp=False, disable_lg=False) -> dt.Var:
    """L_p + lambda_g L_g + lambda_m L_m + lambda_e L_e with ablation switches."""
    terms = []
    if not disable_lp and parts.get("lp") is not None:
        terms.append(parts["lp"])
    if not disable_lg and parts.get("lg") is not None:
        terms.append(dt.mul(parts["lg"], weights.lambda_g))
    terms.append(dt.mul(parts["lm"], weights.lambda_m))
    terms.append(dt.mul(parts["le"], weights.lambda_e))
    out = terms[0]
    for t in terms[1:]:
        out = dt.add(out, t)
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


try:
    from numba import njit

    @njit(cache=True, fastmath=False)
    def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        for i in range(p.size):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)

    def _adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                     m.reshape(-1), v.reshape(-1), lr, beta1, beta2, eps, bc1, bc2)
except Exception:  # pragma: no cover - numba unavailable
    def _adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient in parameter block '{name}'")
        _adam_update(np.atleast_1d(p), np.atleast_1d(np.asarray(g, dtype=np.float64)),
                     np.atleast_1d(state.m[name]), np.atleast_1d(state.v[name]),
                     lr, beta1, beta2, eps, bc1, bc2)


def cosine_lr(base_lr: float, iteration: int, total: int, warmup: int,
              min_factor: float) -> float:
    if total <= 0:
        return base_lr
    if warmup > 0 and iteration < warmup:
        return base_lr * (iteration + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(iteration - warmup, 0) / span, 1.0)
    factor = min_factor + (1.0 - min_factor) * 0.5 * (1.0 + np.cos(np.pi * progress))
    return base_lr * factor


# ---------------------------------------------------------------------------
# ray pools and per-iteration plans


@dataclass
class RayPools:
    """Precomputed per-view lookup tables the batch sampler draws from."""

    origins: np.ndarray      # (V, 3)
    dirs: np.ndarray         # (V, H, W, 3)
    r1: np.ndarray           # (V, 3)
    r2: np.ndarray           # (V, 3)
    stokes: list             # V arrays (H, W, C, 4)
    masks: list              # V bool arrays
    aop: list                # V arrays (H, W)
    aop_valid: list          # V bool arrays
    fg: np.ndarray           # (Nf, 3) rows of (view, y, x)
    bg: np.ndarray           # (Nb, 3)
    cameras: list


def prepare_pools(dataset) -> RayPools:
    origins, dirs, r1, r2 = [], [], [], []
    stokes, masks, aops, aop_valids = [], [], [], []
    fg_rows, bg_rows = [], []
    for vid, view in enumerate(dataset.views):
        cam = view.camera
        o, d = cam.grid_rays()
        origins.append(cam.center)
        dirs.append(d)
        r1.append(cam.r1)
        r2.append(cam.r2)
        stokes.append(np.asarray(view.stokes, dtype=np.float64))
        masks.append(np.asarray(view.mask, dtype=bool))
        aops.append(np.asarray(view.aop, dtype=np.float64))
        aop_valids.append(np.asarray(view.aop_valid, dtype=bool))
        _, _, hits_sphere = rd.ray_sphere_bounds(o.reshape(-1, 3), d.reshape(-1, 3))
        hits_sphere = hits_sphere.reshape(d.shape[:2])
        ys, xs = np.nonzero(masks[-1])
        fg_rows.append(np.stack([np.full_like(ys, vid), ys, xs], axis=-1))
        ys, xs = np.nonzero(~masks[-1] & hits_sphere)
        bg_rows.append(np.stack([np.full_like(ys, vid), ys, xs], axis=-1))
    fg = np.concatenate(fg_rows) if fg_rows else np.zeros((0, 3), dtype=int)
    bg = np.concatenate(bg_rows) if bg_rows else np.zeros((0, 3), dtype=int)
    if len(fg) == 0:
        raise InvalidInputError("dataset has no masked-in pixels")
    return RayPools(np.array(origins), np.stack(dirs), np.array(r1), np.array(r2),
                    stokes, masks, aops, aop_valids, fg, bg,
                    [v.camera for v in dataset.views])


@dataclass
class IterationPlan:
    """Frozen stochastic structure for one loss evaluation."""

    ray_o: np.ndarray
    ray_d: np.ndarray
    ray_r1: np.ndarray
    ray_r2: np.ndarray
    ts: np.ndarray
    mask_targets: np.ndarray
    fg_sel: np.ndarray           # boolean: rays with mask 1 (photometric set)
    obs_s0: np.ndarray
    obs_s1: np.ndarray
    obs_s2: np.ndarray
    geo_pts: np.ndarray          # (P, 3)
    geo_rows_t: np.ndarray       # (Q, 3)
    geo_rows_h: np.ndarray       # (Q, 3)
    geo_point_idx: np.ndarray    # (Q,)
    geo_skipped: int
    eik_pts: np.ndarray          # (E, 3)
    shade_sel: np.ndarray = None # flat indices into B*(S-1) contribution slots
    shade_valid: np.ndarray = None


def build_plan(pools: RayPools, fs: fd.FieldSet, cfg: TrainConfig,
               rng: np.random.Generator) -> IterationPlan:
    nb = cfg.rays_per_batch
    n_bg = int(round(nb * cfg.bg_fraction)) if len(pools.bg) else 0
    n_fg = nb - n_bg
    picks_fg = pools.fg[rng.integers(0, len(pools.fg), n_fg)]
    picks = [picks_fg]
    if n_bg:
        picks.append(pools.bg[rng.integers(0, len(pools.bg), n_bg)])
    picks = np.concatenate(picks)
    vids, ys, xs = picks[:, 0], picks[:, 1], picks[:, 2]

    ray_o = pools.origins[vids]
    ray_d = pools.dirs[vids, ys, xs]
    ray_r1 = pools.r1[vids]
    ray_r2 = pools.r2[vids]
    mask_targets = np.array([pools.masks[v][y, x] for v, y, x in picks], dtype=np.float64)
    fg_sel = mask_targets > 0.5
    obs = np.stack([pools.stokes[v][y, x] for v, y, x in picks])  # (B, C, 4)
    ts = rd.plan_ray_samples(fs, ray_o, ray_d, cfg.n_coarse, cfg.n_fine, rng)
    shade_sel, shade_valid = _plan_shading(fs, ray_o, ray_d, ts, cfg.shade_weight_min)

    geo = _plan_geometry(pools, fs, cfg, rng) if not cfg.disable_lg else (
        np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int), 0)
    eik = _plan_eikonal(ray_o, ray_d, ts, cfg, rng)

    return IterationPlan(
        ray_o=ray_o, ray_d=ray_d, ray_r1=ray_r1, ray_r2=ray_r2, ts=ts,
        mask_targets=mask_targets, fg_sel=fg_sel,
        obs_s0=obs[..., 0], obs_s1=obs[..., 1], obs_s2=obs[..., 2],
        geo_pts=geo[0], geo_rows_t=geo[1], geo_rows_h=geo[2],
        geo_point_idx=geo[3], geo_skipped=geo[4], eik_pts=eik,
        shade_sel=shade_sel, shade_valid=shade_valid)


def _plan_shading(fs: fd.FieldSet, ray_o, ray_d, ts, weight_min: float):
    """Contribution slots worth shading, from a value-only weights pass.

    Slots with weight exactly 0 carry no Stokes gradient, so dropping them is
    free; a small positive threshold additionally skips negligible tails.
    """
    pts = ray_o[:, None, :] + ts[..., None] * ray_d[:, None, :]
    f = fd.trilinear_np(fs.sdf, pts, fs.n)
    alpha = rd._alphas_np(f, fs.s_sharp)
    w = rd._transmittance_np(alpha) * alpha
    sel = np.nonzero(w.ravel() > weight_min)[0]
    # pad to a bucketed length so tape buffer shapes repeat across iterations
    bucket = 4096
    padded = max(bucket, int(np.ceil(len(sel) / bucket)) * bucket)
    valid = np.zeros(padded)
    valid[:len(sel)] = 1.0
    sel = np.concatenate([sel, np.zeros(padded - len(sel), dtype=sel.dtype)])
    return sel, valid


def _plan_geometry(pools: RayPools, fs: fd.FieldSet, cfg: TrainConfig,
                   rng: np.random.Generator):
    picks = pools.fg[rng.integers(0, len(pools.fg), cfg.geo_points)]
    o = pools.origins[picks[:, 0]]
    d = pools.dirs[picks[:, 0], picks[:, 1], picks[:, 2]]
    pts, hit = rd.ray_surface_intersection(fs, o, d, n_steps=128)
    pts = pts[hit]
    if len(pts) == 0:
        return (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                np.zeros(0, dtype=int), int(cfg.geo_points))
    rows_t, rows_h, point_idx = [], [], []
    counts = np.zeros(len(pts), dtype=int)
    for vid, cam in enumerate(pools.cameras):
        pix, depth = cam.project_unchecked(pts)
        h_img, w_img = pools.masks[vid].shape
        ix = np.clip(np.floor(pix[:, 0]).astype(int), 0, w_img - 1)
        iy = np.clip(np.floor(pix[:, 1]).astype(int), 0, h_img - 1)
        inside = ((depth > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < w_img)
                  & (pix[:, 1] >= 0) & (pix[:, 1] < h_img))
        inside &= pools.masks[vid][iy, ix] & pools.aop_valid[vid][iy, ix]
        if not np.any(inside):
            continue
        vis = np.zeros(len(pts), dtype=bool)
        vis[inside] = rd.surface_visibility(fs, cam, pts[inside])
        if not np.any(vis):
            continue
        phi = pools.aop[vid][iy[vis], ix[vis]]
        r1 = np.broadcast_to(cam.r1, (vis.sum(), 3))
        r2 = np.broadcast_to(cam.r2, (vis.sum(), 3))
        t_rows, h_rows = tangent_rows(r1, r2, phi)
        rows_t.append(t_rows)
        rows_h.append(h_rows)
        point_idx.append(np.nonzero(vis)[0])
        counts[vis] += 1
    if not rows_t:
        return (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                np.zeros(0, dtype=int), int(cfg.geo_points))
    keep = counts > 0
    remap = -np.ones(len(pts), dtype=int)
    remap[keep] = np.arange(keep.sum())
    rows_t = np.concatenate(rows_t)
    rows_h = np.concatenate(rows_h)
    point_idx = remap[np.concatenate(point_idx)]
    skipped = int((~keep).sum()) + int(cfg.geo_points - len(pts))
    return pts[keep], rows_t, rows_h, point_idx, skipped


def _plan_eikonal(ray_o, ray_d, ts, cfg: TrainConfig, rng: np.random.Generator):
    uni = np.zeros((0, 3))
    if cfg.eik_points > 0:
        cube = rng.uniform(-1.0, 1.0, (cfg.eik_points * 3, 3))
        inside = np.linalg.norm(cube, axis=-1) <= 1.0
        uni = cube[inside][:cfg.eik_points]
    n_ray = min(cfg.eik_points, ray_o.shape[0] * ts.shape[1])
    flat = rng.integers(0, ray_o.shape[0] * ts.shape[1], n_ray)
    bi, si = flat // ts.shape[1], flat % ts.shape[1]
    on_ray = ray_o[bi] + ts[bi, si, None] * ray_d[bi]
    return np.concatenate([uni, on_ray])


# ---------------------------------------------------------------------------
# loss evaluation on a tape


def evaluate_losses(fv: fd.FieldVars, plan: IterationPlan, cfg: TrainConfig) -> dict:
    """Replay a plan on the tape; returns Vars for each loss and the total."""
    parts = {"lp": None, "lg": None}

    if cfg.disable_lp:
        f = fv.sample_sdf(plan.ray_o[:, None, :] + plan.ts[..., None] * plan.ray_d[:, None, :])
        s_sharp = fv.s_sharp()
        phi = dt.sigmoid(dt.mul(f, s_sharp))
        ns = plan.ts.shape[1] - 1
        phi_i = dt.slice_last(phi, 0, ns)
        phi_j = dt.slice_last(phi, 1, ns + 1)
        raw = dt.div(dt.sub(phi_i, phi_j), dt.add(phi_i, rd.ALPHA_EPS))
        alpha = dt.minimum(dt.maximum(raw, 0.0), rd.ALPHA_MAX)
        log_t = dt.log(dt.sub(1.0, alpha, tape=alpha.tape))
        trans = dt.exp(dt.shift_right_last(dt.cumsum_last(log_t)))
        opacity = dt.vsum(dt.mul(trans, alpha), axis=-1)
    else:
        out = rd.volume_stokes_vars(fv, plan.ray_o, plan.ray_d, plan.ts,
                                    plan.ray_r1, plan.ray_r2,
                                    shade_sel=plan.shade_sel,
                                    shade_valid=plan.shade_valid)
        opacity = out["opacity"]
        fg = plan.fg_sel
        if np.any(fg):
            pred = {k: _select_rows(out[k], fg) for k in ("s0", "s1", "s2")}
            parts["lp"] = loss_photometric(pred, plan.obs_s0[fg], plan.obs_s1[fg],
                                           plan.obs_s2[fg])
        else:
            parts["lp"] = None

    parts["lm"] = loss_mask(opacity, plan.mask_targets)

    gx, gy, gz = fv.sdf_gradient(plan.eik_pts)
    parts["le"] = loss_eikonal(gx, gy, gz)

    if not cfg.disable_lg and len(plan.geo_pts):
        ngx, ngy, ngz = fv.sdf_gradient(plan.geo_pts)
        g2 = ngx * ngx + ngy * ngy + ngz * ngz
        gn = dt.sqrt(g2 + 1e-20)
        inv = dt.div(1.0, gn, tape=gn.tape)
        parts["lg"] = loss_geometric(ngx * inv, ngy * inv, ngz * inv,
                                     plan.geo_rows_t, plan.geo_rows_h,
                                     plan.geo_point_idx, len(plan.geo_pts),
                                     cfg.stack_both)
    else:
        parts["lg"] = None

    parts["total"] = total_loss(parts, cfg.weights, cfg.disable_lp, cfg.disable_lg)
    return parts


def _select_rows(v: dt.Var, sel: np.ndarray) -> dt.Var:
    idx = np.nonzero(sel)[0]
    return dt.gather(v, idx)


# ---------------------------------------------------------------------------
# the training loop


def reconstruct(dataset, cfg: TrainConfig, out_dir=None, callback=None):
    """Optimize a FieldSet against a polarized dataset.

    Returns (fields, log_rows); log rows are (iter, lp, lg, lm, le, total,
    s_sharp, wall_ms).  With out_dir set, periodic checkpoints and the loss
    CSV are written there.  A non-finite loss aborts with the last good
    checkpoint saved.
    """
    if len(dataset.views) < 2:
        raise InvalidInputError("reconstruction needs at least 2 views")
    pools = prepare_pools(dataset)
    fs = fd.FieldSet.create(n=cfg.grid_resolution, sh_degree=cfg.sh_degree,
                            eta=dataset.material.eta, init_radius=cfg.init_radius,
                            s_init=cfg.s_sharp_init)
    params = fs.params()
    state = AdamState.for_params(params)
    rows = []
    last_good = {k: v.copy() for k, v in params.items()}

    for it in range(cfg.iterations):
        t_start = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, it)))
        if cfg.s_sharp_schedule == "exp":
            frac = it / max(cfg.iterations - 1, 1)
            fs.s_log[...] = np.log(cfg.s_sharp_init) + frac * (
                np.log(cfg.s_sharp_final) - np.log(cfg.s_sharp_init))
        plan = build_plan(pools, fs, cfg, rng)
        tape = dt.Tape()
        fv = fs.register(tape)
        parts = evaluate_losses(fv, plan, cfg)
        total = parts["total"]
        if not np.isfinite(total.value):
            if out_dir is not None:
                _restore(params, last_good)
                fs.save(_path(out_dir, "checkpoint_lastgood.bin"))
            raise NumericalFailure(f"loss became non-finite at iteration {it}")
        grads = tape.backward(total)
        if cfg.grad_clip > 0:
            for g in grads.values():
                np.clip(g, -cfg.grad_clip, cfg.grad_clip, out=np.atleast_1d(g))
        if cfg.s_sharp_schedule == "exp":
            grads["s_log"] = np.zeros_like(grads["s_log"])
        lr = cosine_lr(cfg.learning_rate, it, cfg.iterations, cfg.lr_warmup,
                       cfg.lr_min_factor)
        adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        tape.release()
        np.clip(fs.s_log, 0.0, np.log(cfg.s_sharp_max), out=fs.s_log)
        wall_ms = (time.perf_counter() - t_start) * 1000.0
        rows.append((it, _val(parts["lp"]), _val(parts["lg"]), _val(parts["lm"]),
                     _val(parts["le"]), float(total.value), fs.s_sharp, wall_ms))
        if callback is not None:
            callback(it, rows[-1], fs)
        if out_dir is not None and cfg.checkpoint_every > 0 and (it + 1) % cfg.checkpoint_every == 0:
            fs.save(_path(out_dir, f"checkpoint_{it + 1:06d}.bin"))
            last_good = {k: v.copy() for k, v in params.items()}
    if out_dir is not None:
        write_log_csv(_path(out_dir, "train_log.csv"), rows)
    return fs, rows


def _restore(params, saved):
    for k in params:
        params[k][...] = saved[k]


def _val(part) -> float:
    return float(part.value) if part is not None else 0.0


def _path(out_dir, name):
    import os
    return os.path.join(str(out_dir), name)


LOG_COLUMNS = ("iter", "L_p", "L_g", "L_m", "L_e", "total", "s_sharp", "wall_ms")


def write_log_csv(path, rows):
    """Training log; wall_ms is diagnostic only (see determinism criterion)."""
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            it, lp, lg, lm, le, tot, s, wall = row
            fh.write(f"{it},{lp:.10e},{lg:.10e},{lm:.10e},{le:.10e},"
                     f"{tot:.10e},{s:.10e},{wall:.3f}\n")
