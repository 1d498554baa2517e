"""Differentiable scene representation: dense SDF / diffuse-radiance /
roughness grids over [-1, 1]^3, a spherical-harmonic environment with
roughness-dependent band attenuation, and the NeuS sharpness parameter.

Grids are corner-aligned: node (i, j, k) sits at -1 + 2 i / (n - 1), flat
index (i * n + j) * n + k.  Trilinear interpolation is differentiable with
respect to the eight cell corners; positions are treated as constants by the
tape (the optimizer never differentiates through sample placement).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from . import difftape as dt
from .errors import DegenerateNormalError, EmptySurfaceError, InvalidInputError

ROUGH_EPS = 1e-3

# ---------------------------------------------------------------------------
# real spherical harmonics (polynomial form, degrees 0..4)

_SH_COEFFS = {
    0: 0.28209479177387814,
    1: 0.4886025119029199,
    2: (1.0925484305920792, 0.31539156525252005, 0.5462742152960396),
    3: (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
        0.3731763325901154, 1.445305721320277),
    4: (2.5033429417967046, 1.7701307697799304, 0.9461746957575601,
        0.6690465435572892, 0.10578554691520431, 0.47308734787878004,
        0.6258357354491761),
}


def sh_band_indices(degree: int) -> np.ndarray:
    """Band number l for each coefficient index up to `degree`."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(degree + 1)])


def _sh_terms(x, y, z, degree, ops):
    """Shared SH polynomial table; `ops` supplies (mul, add) semantics so the
    same expressions serve both numpy arrays and tape Vars."""
    c = _SH_COEFFS
    terms = [c[0] * _ones_like(x, ops)]
    if degree >= 1:
        terms += [c[1] * y, c[1] * z, c[1] * x]
    if degree >= 2:
        k = c[2]
        z2 = z * z
        terms += [k[0] * (x * y), k[0] * (y * z), k[1] * (3.0 * z2 - 1.0),
                  k[0] * (x * z), k[2] * (x * x - y * y)]
    if degree >= 3:
        k = c[3]
        x2, y2, z2 = x * x, y * y, z * z
        terms += [k[0] * (y * (3.0 * x2 - y2)), k[1] * (x * y * z),
                  k[2] * (y * (5.0 * z2 - 1.0)), k[3] * (z * (5.0 * z2 - 3.0)),
                  k[2] * (x * (5.0 * z2 - 1.0)), k[4] * (z * (x2 - y2)),
                  k[0] * (x * (x2 - 3.0 * y2))]
    if degree >= 4:
        k = c[4]
        x2, y2, z2 = x * x, y * y, z * z
        terms += [k[0] * (x * y * (x2 - y2)), k[1] * (y * z * (3.0 * x2 - y2)),
                  k[2] * (x * y * (7.0 * z2 - 1.0)), k[3] * (y * z * (7.0 * z2 - 3.0)),
                  k[4] * (35.0 * z2 * z2 - 30.0 * z2 + 3.0),
                  k[3] * (x * z * (7.0 * z2 - 3.0)),
                  k[5] * ((x2 - y2) * (7.0 * z2 - 1.0)),
                  k[1] * (x * z * (x2 - 3.0 * y2)),
                  k[6] * (x2 * x2 - 6.0 * x2 * y2 + y2 * y2)]
    if degree > 4:
        raise InvalidInputError("spherical harmonics implemented up to degree 4")
    return terms


def _ones_like(x, ops):
    if ops == "np":
        return np.ones_like(np.asarray(x, dtype=np.float64))
    return dt.add(dt.mul(x, 0.0), 1.0)


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions (..., 3) -> (..., n_coeff)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    return np.stack(_sh_terms(x, y, z, degree, "np"), axis=-1)


# ---------------------------------------------------------------------------
# trilinear grid machinery


def _corner_layout(pts, n: int):
    """Corner flat indices, weights and weight gradients for trilinear lookup.

    Returns (idx[8], w[8], dw[3][8]); dw already includes the world-to-grid
    scale (n - 1) / 2.  Points outside [-1, 1]^3 clamp to the boundary.
    """
    pts = np.asarray(pts, dtype=np.float64)
    u = (pts + 1.0) * 0.5 * (n - 1)
    u = np.clip(u, 0.0, n - 1 - 1e-9)
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    scale = 0.5 * (n - 1)
    wx = (1.0 - f[..., 0], f[..., 0])
    wy = (1.0 - f[..., 1], f[..., 1])
    wz = (1.0 - f[..., 2], f[..., 2])
    idx, w, dwx, dwy, dwz = [], [], [], [], []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                idx.append(((i0[..., 0] + cx) * n + i0[..., 1] + cy) * n + i0[..., 2] + cz)
                w.append(wx[cx] * wy[cy] * wz[cz])
                sx = scale if cx else -scale
                sy = scale if cy else -scale
                sz = scale if cz else -scale
                dwx.append(sx * wy[cy] * wz[cz])
                dwy.append(wx[cx] * sy * wz[cz])
                dwz.append(wx[cx] * wy[cy] * sz)
    return idx, w, (dwx, dwy, dwz)


def trilinear_np(values: np.ndarray, pts, n: int) -> np.ndarray:
    """Numpy trilinear interpolation; values is (n^3,) or (n^3, C)."""
    idx, w, _ = _corner_layout(pts, n)
    chan = values.ndim == 2
    acc = None
    for i, wi in zip(idx, w):
        v = values[i]
        term = v * (wi[..., None] if chan else wi)
        acc = term if acc is None else acc + term
    return acc


def trilinear_gradient_np(values: np.ndarray, pts, n: int) -> np.ndarray:
    """Spatial gradient of the interpolant at pts; values (n^3,) -> (..., 3)."""
    idx, _, dws = _corner_layout(pts, n)
    out = []
    for dw in dws:
        acc = None
        for i, dwi in zip(idx, dw):
            term = values[i] * dwi
            acc = term if acc is None else acc + term
        out.append(acc)
    return np.stack(out, axis=-1)


# ---------------------------------------------------------------------------
# the field set


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise InvalidInputError("mesh has non-finite vertices")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face indices out of range")


@dataclass
class FieldSet:
    """All optimizable state plus the fixed refractive index."""

    n: int
    sh_degree: int
    sdf: np.ndarray
    diffuse: np.ndarray
    rough_raw: np.ndarray
    env_sh: np.ndarray
    s_log: np.ndarray
    eta: float = 1.5

    PARAM_NAMES = ("sdf", "diffuse", "rough_raw", "env_sh", "s_log")

    @classmethod
    def create(cls, n: int = 64, sh_degree: int = 4, eta: float = 1.5,
               init_radius: float = 0.5, s_init: float = 16.0,
               diffuse_init: float = 0.2, rough_init: float = 0.3,
               env_init: float = 0.5) -> "FieldSet":
        pts = grid_points(n)
        sdf = np.linalg.norm(pts, axis=-1) - init_radius
        diffuse = np.full((n ** 3, 3), diffuse_init)
        raw = _logit((rough_init - ROUGH_EPS) / (1.0 - ROUGH_EPS))
        rough_raw = np.full(n ** 3, raw)
        n_coeff = (sh_degree + 1) ** 2
        env_sh = np.zeros((n_coeff, 3))
        env_sh[0] = env_init / _SH_COEFFS[0]
        return cls(n=n, sh_degree=sh_degree, sdf=sdf, diffuse=diffuse,
                   rough_raw=rough_raw, env_sh=env_sh,
                   s_log=np.asarray(np.log(s_init)), eta=eta)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def register(self, tape: dt.Tape) -> "FieldVars":
        return FieldVars(self, {name: tape.param(name, val)
                                for name, val in self.params().items()})

    @property
    def s_sharp(self) -> float:
        return float(np.exp(self.s_log))

    # -- persistence --------------------------------------------------------

    MAGIC = b"POLARSDF-FIELDS\n"

    def save(self, path):
        header = {
            "version": 1,
            "grid_resolution": self.n,
            "sh_degree": self.sh_degree,
            "eta": self.eta,
            "params": [],
        }
        payload = b""
        for name in self.PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype="<f8")
            header["params"].append({"name": name, "shape": list(arr.shape),
                                     "offset": len(payload), "bytes": arr.nbytes})
            payload += np.ascontiguousarray(arr).tobytes()
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(payload)

    @classmethod
    def load(cls, path) -> "FieldSet":
        with open(path, "rb") as fh:
            magic = fh.read(len(cls.MAGIC))
            if magic != cls.MAGIC:
                raise InvalidInputError(f"not a field checkpoint: {path}")
            (blob_len,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(blob_len).decode())
            payload = fh.read()
        kwargs = {"n": header["grid_resolution"], "sh_degree": header["sh_degree"],
                  "eta": header["eta"]}
        for p in header["params"]:
            arr = np.frombuffer(payload, dtype="<f8",
                                count=p["bytes"] // 8, offset=p["offset"])
            kwargs[p["name"]] = arr.reshape(p["shape"]).copy()
        return cls(**kwargs)


def _logit(p):
    return float(np.log(p / (1.0 - p)))


def grid_points(n: int) -> np.ndarray:
    """World coordinates of all grid nodes, flattened to (n^3, 3)."""
    axis = np.linspace(-1.0, 1.0, n)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


# ---------------------------------------------------------------------------
# numpy sampling API


def sample_sdf(fs: FieldSet, x) -> np.ndarray:
    return trilinear_np(fs.sdf, x, fs.n)


def sample_diffuse(fs: FieldSet, x) -> np.ndarray:
    return trilinear_np(fs.diffuse, x, fs.n)


def sample_rough(fs: FieldSet, x) -> np.ndarray:
    from scipy.special import expit
    raw = trilinear_np(fs.rough_raw, x, fs.n)
    return expit(raw) * (1.0 - ROUGH_EPS) + ROUGH_EPS


def sdf_gradient(fs: FieldSet, x) -> np.ndarray:
    return trilinear_gradient_np(fs.sdf, x, fs.n)


def sdf_normal(fs: FieldSet, x) -> np.ndarray:
    g = sdf_gradient(fs, x)
    norm = np.linalg.norm(g, axis=-1)
    if np.any(norm <= 1e-8):
        raise DegenerateNormalError(
            f"SDF gradient norm {norm.min():.3e} too small for a unit normal")
    return g / norm[..., None]


def eval_env(fs: FieldSet, d, roughness) -> np.ndarray:
    """SH radiance with per-band attenuation exp(-l (l+1) roughness^2)."""
    d = np.asarray(d, dtype=np.float64)
    y = sh_basis(d, fs.sh_degree)
    bands = sh_band_indices(fs.sh_degree)
    rough = np.asarray(roughness, dtype=np.float64)
    att = np.exp(-bands * (bands + 1.0) * (rough[..., None] ** 2))
    return (y * att) @ fs.env_sh


def marching_cubes(fs_or_values, iso: float = 0.0, n: int = None) -> Mesh:
    """Zero-level-set mesh of the SDF grid (linear edge interpolation)."""
    if isinstance(fs_or_values, FieldSet):
        values, n = fs_or_values.sdf, fs_or_values.n
    else:
        values = np.asarray(fs_or_values, dtype=np.float64)
        if n is None:
            n = round(len(values) ** (1 / 3))
    vol = values.reshape(n, n, n)
    if vol.min() >= iso or vol.max() <= iso:
        raise EmptySurfaceError("grid does not cross the isovalue")
    h = 2.0 / (n - 1)
    verts, faces, normals, _ = measure.marching_cubes(vol, level=iso, spacing=(h, h, h))
    verts = verts - 1.0
    # skimage normals follow decreasing values; SDF outward is increasing
    return Mesh(verts, faces, -normals)


# ---------------------------------------------------------------------------
# tape sampling API


class FieldVars:
    """Var handles for one tape generation, mirroring the numpy sampling API."""

    def __init__(self, fs: FieldSet, handles: dict):
        self.fs = fs
        self.h = handles

    def s_sharp(self) -> dt.Var:
        return dt.exp(self.h["s_log"])

    def _corners(self, pts):
        idx, w, dws = _corner_layout(pts, self.fs.n)
        return np.stack(idx), np.stack(w), tuple(np.stack(dw) for dw in dws)

    def sample_sdf(self, pts, corners=None) -> dt.Var:
        idx, w, _ = corners if corners is not None else self._corners(pts)
        return dt.trilinear(self.h["sdf"], idx, w)

    def sample_diffuse(self, pts, corners=None) -> dt.Var:
        idx, w, _ = corners if corners is not None else self._corners(pts)
        return dt.trilinear(self.h["diffuse"], idx, w)

    def sample_rough(self, pts, corners=None) -> dt.Var:
        idx, w, _ = corners if corners is not None else self._corners(pts)
        raw = dt.trilinear(self.h["rough_raw"], idx, w)
        return dt.sigmoid(raw) * (1.0 - ROUGH_EPS) + ROUGH_EPS

    def sdf_gradient(self, pts, corners=None) -> tuple:
        """Gradient components (gx, gy, gz) as Vars."""
        idx, _, dws = corners if corners is not None else self._corners(pts)
        return tuple(dt.trilinear(self.h["sdf"], idx, dw) for dw in dws)

    def eval_env(self, dx, dy, dz, rough) -> dt.Var:
        """SH environment radiance along (dx, dy, dz) Vars, attenuated by the
        per-sample roughness Var; returns (..., 3)."""
        terms = _sh_terms(dx, dy, dz, self.fs.sh_degree, "tape")
        bands = sh_band_indices(self.fs.sh_degree)
        rough2 = dt.mul(rough, rough)
        atts = {0: None}
        for l in range(1, self.fs.sh_degree + 1):
            atts[l] = dt.exp(dt.mul(rough2, -float(l * (l + 1))))
        attd = []
        for term, l in zip(terms, bands):
            attd.append(term if atts[int(l)] is None else dt.mul(term, atts[int(l)]))
        y = dt.stack_last(attd)
        return dt.tensordot_last(y, self.h["env_sh"])
