"""Pinhole cameras, projected-tangent constraints and multiview tangent systems.

World coordinates are normalized so the object fits inside the unit sphere at
the origin and every camera looks inward.  Rotation rows r1, r2, r3 map world
to camera coordinates (x right, y down in the image, z forward).

The projected azimuth of a normal n in a view is defined operationally as the
angle phi for which the tangent residual (r1.n) cos phi - (r2.n) sin phi
vanishes, i.e. phi = atan2(r1.n, r2.n) modulo pi.  A diffuse-dominant pixel's
AoP equals this angle; a specular-dominant pixel's AoP is offset by pi/2 and
is absorbed by the pseudo tangent row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AmbiguousNormalError, BehindCameraError, InvalidInputError
from .polarimetry import wrap_aop

DOMINANCE_DIFFUSE = "diffuse"
DOMINANCE_SPECULAR = "specular"
DOMINANCE_UNKNOWN = "unknown"


@dataclass
class Camera:
    """Pinhole camera: intrinsics K, world-to-camera rotation R, translation t."""

    k: np.ndarray
    r: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64).reshape(3, 3)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.r @ self.r.T, np.eye(3), atol=1e-8):
            raise InvalidInputError("rotation is not orthonormal to 1e-8")
        if not np.isclose(np.linalg.det(self.r), 1.0, atol=1e-8):
            raise InvalidInputError("rotation determinant is not +1")
        if self.k[1, 0] != 0 or self.k[2, 0] != 0 or self.k[2, 1] != 0:
            raise InvalidInputError("intrinsics must be upper-triangular")
        if self.k[0, 0] <= 0 or self.k[1, 1] <= 0:
            raise InvalidInputError("focal lengths must be positive")

    @property
    def r1(self):
        return self.r[0]

    @property
    def r2(self):
        return self.r[1]

    @property
    def r3(self):
        return self.r[2]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r.T @ self.t

    def transform(self, x) -> np.ndarray:
        """World point(s) -> camera frame."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.r.T + self.t

    def project(self, x):
        """Perspective projection; returns (pixel (..., 2), depth (...))."""
        xc = self.transform(x)
        depth = xc[..., 2]
        if np.any(depth <= 0.0):
            raise BehindCameraError(f"point at camera-frame depth {np.min(depth):.4g}")
        u = self.k[0, 0] * xc[..., 0] / depth + self.k[0, 2]
        v = self.k[1, 1] * xc[..., 1] / depth + self.k[1, 2]
        return np.stack([u, v], axis=-1), depth

    def project_unchecked(self, x):
        """Like project but tolerating depth <= 0; caller filters by depth."""
        xc = self.transform(x)
        depth = xc[..., 2]
        safe = np.where(depth == 0.0, 1.0, depth)
        u = self.k[0, 0] * xc[..., 0] / safe + self.k[0, 2]
        v = self.k[1, 1] * xc[..., 1] / safe + self.k[1, 2]
        return np.stack([u, v], axis=-1), depth

    def backproject(self, pixel, depth) -> np.ndarray:
        """Pixel coordinates plus camera-frame depth -> world point(s)."""
        pixel = np.asarray(pixel, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (pixel[..., 0] - self.k[0, 2]) / self.k[0, 0]
        y = (pixel[..., 1] - self.k[1, 2]) / self.k[1, 1]
        xc = np.stack([x * depth, y * depth, depth], axis=-1)
        return (xc - self.t) @ self.r

    def pixel_rays(self, pixels) -> tuple:
        """Unit world-space rays through pixel coordinates: (origins, directions)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        x = (pixels[..., 0] - self.k[0, 2]) / self.k[0, 0]
        y = (pixels[..., 1] - self.k[1, 2]) / self.k[1, 1]
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        d_world = d_cam @ self.r
        d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.center, d_world.shape)
        return np.ascontiguousarray(origins), d_world

    def grid_rays(self) -> tuple:
        """Rays through every pixel center; shapes (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5,
                           np.arange(self.height) + 0.5)
        return self.pixel_rays(np.stack([u, v], axis=-1))

    def to_dict(self) -> dict:
        return {
            "k": self.k.reshape(-1).tolist(),
            "r": self.r.reshape(-1).tolist(),
            "t": self.t.tolist(),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["k"], dtype=np.float64).reshape(3, 3),
                   np.array(d["r"], dtype=np.float64).reshape(3, 3),
                   np.array(d["t"], dtype=np.float64),
                   int(d["width"]), int(d["height"]))


def look_at_camera(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
                   fov_deg=30.0, width=64, height=64) -> Camera:
    """Inward-looking camera with a y-down image frame."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    if abs(forward @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    t = -r @ eye
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    k = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    return Camera(k, r, t, width, height)


def fibonacci_sphere(count: int) -> np.ndarray:
    """Well-spread unit directions (deterministic golden-angle spiral)."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def fibonacci_cameras(count: int, radius: float, fov_deg: float,
                      width: int, height: int) -> list:
    """Deterministic set of inward cameras spread over the view sphere."""
    return [look_at_camera(d * radius, fov_deg=fov_deg, width=width, height=height)
            for d in fibonacci_sphere(count)]


def ring_cameras(count: int, radius: float, elevation_deg: float, fov_deg: float,
                 width: int, height: int) -> list:
    phis = 2.0 * np.pi * np.arange(count) / count
    el = np.deg2rad(elevation_deg)
    eyes = radius * np.stack([np.cos(el) * np.cos(phis),
                              np.cos(el) * np.sin(phis),
                              np.full_like(phis, np.sin(el))], axis=-1)
    return [look_at_camera(e, fov_deg=fov_deg, width=width, height=height) for e in eyes]


# ---------------------------------------------------------------------------
# tangent machinery


@dataclass
class TangentPair:
    """Projected tangent t_vec = cos(phi) r1 - sin(phi) r2 and its pseudo
    counterpart t_hat = sin(phi) r1 + cos(phi) r2."""

    t_vec: np.ndarray
    t_hat: np.ndarray

    def __post_init__(self):
        self.t_vec = np.asarray(self.t_vec, dtype=np.float64)
        self.t_hat = np.asarray(self.t_hat, dtype=np.float64)


def tangent_pair(cam: Camera, phi: float) -> TangentPair:
    if not np.all(np.isfinite(phi)):
        raise InvalidInputError("non-finite azimuth angle")
    c, s = np.cos(phi), np.sin(phi)
    return TangentPair(c * cam.r1 - s * cam.r2, s * cam.r1 + c * cam.r2)


def tangent_rows(r1, r2, phi):
    """Vectorized tangent pair: r1, r2 (..., 3), phi (...) -> two (..., 3) rows."""
    c = np.cos(phi)[..., None]
    s = np.sin(phi)[..., None]
    return c * r1 - s * r2, s * r1 + c * r2


def projected_azimuth(cam: Camera, n) -> np.ndarray:
    """The angle whose tangent residual vanishes for normal n in this view."""
    n = np.asarray(n, dtype=np.float64)
    return wrap_aop(np.arctan2(n @ cam.r1, n @ cam.r2))


@dataclass
class TangentSystem:
    """Stacked tangent rows for one scene point across its observing views.

    `groups` holds per-observation row index tuples: 1-tuples where dominance
    fixed the branch, 2-tuples (t_vec row, t_hat row) where it is unknown and
    the loss applies min-selection.
    """

    rows: np.ndarray
    point: np.ndarray
    view_ids: list
    groups: list

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, 3)
        self.point = np.asarray(self.point, dtype=np.float64)
        if self.rows.shape[0] < 1:
            raise InvalidInputError("tangent system needs at least one row")


def build_tangent_system(x, observations) -> TangentSystem:
    """Observations are (camera, aop, dominance) triples for one world point."""
    if len(observations) == 0:
        raise InvalidInputError("empty observation list")
    rows, groups, view_ids = [], [], []
    for vid, (cam, phi_a, dominance) in enumerate(observations):
        pair = tangent_pair(cam, phi_a)
        if dominance == DOMINANCE_DIFFUSE:
            groups.append((len(rows),))
            rows.append(pair.t_vec)
        elif dominance == DOMINANCE_SPECULAR:
            groups.append((len(rows),))
            rows.append(pair.t_hat)
        elif dominance == DOMINANCE_UNKNOWN:
            groups.append((len(rows), len(rows) + 1))
            rows.append(pair.t_vec)
            rows.append(pair.t_hat)
        else:
            raise InvalidInputError(f"unknown dominance {dominance!r}")
        view_ids.append(vid)
    return TangentSystem(np.array(rows), x, view_ids, groups)


def nullspace_normal(system: TangentSystem, first_camera: Camera = None) -> tuple:
    """Smallest-singular-direction normal of the stacked rows plus residual.

    Requires rank >= 2; rank-deficient systems raise AmbiguousNormalError
    carrying the 2D null basis.  Sign faces the first observing camera when
    one is supplied, otherwise the canonical sign (first nonzero component
    positive) is returned.
    """
    rows = system.rows
    _, svals, vt = np.linalg.svd(rows, full_matrices=True)
    svals = np.concatenate([svals, np.zeros(3 - len(svals))])
    if svals[1] <= 1e-8 * max(svals[0], 1e-30):
        raise AmbiguousNormalError(
            "tangent system has fewer than 2 independent rows",
            null_basis=vt[1:])
    # deterministic tie-break for equal trailing singular values
    if abs(svals[1] - svals[2]) <= 1e-12 * max(svals[0], 1e-30):
        cands = [_canonical_sign(vt[1]), _canonical_sign(vt[2])]
        normal = min(cands, key=tuple)
    else:
        normal = _canonical_sign(vt[2])
    residual = float(svals[2])
    if first_camera is not None:
        to_cam = first_camera.center - system.point
        if normal @ to_cam < 0:
            normal = -normal
    return normal, residual


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    for comp in v:
        if comp != 0.0:
            return v if comp > 0 else -v
    return v
