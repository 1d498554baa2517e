"""Analytic ground-truth scenes: SDF primitives, environment light models and
the Scene container the forward renderer consumes.

All primitives are built from distance bounds (Lipschitz constant 1 by
construction), so conservative sphere tracing with a small safety factor is
robust.  Gradients use central differences, which keeps compound shapes
uniform; the step is small enough that normals are accurate to ~1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .geometry import Camera, fibonacci_cameras, look_at_camera, ring_cameras
from .pbrdf import Material

_GRAD_STEP = 1e-6


# ---------------------------------------------------------------------------
# signed distance primitives


def sdf_sphere(p, radius, center=(0.0, 0.0, 0.0)):
    q = p - np.asarray(center, dtype=np.float64)
    return np.linalg.norm(q, axis=-1) - radius


def sdf_torus(p, major, minor, center=(0.0, 0.0, 0.0)):
    """Torus around the z axis through `center`."""
    q = p - np.asarray(center, dtype=np.float64)
    ring = np.hypot(q[..., 0], q[..., 1]) - major
    return np.hypot(ring, q[..., 2]) - minor


def sdf_rounded_box(p, half_extents, radius, center=(0.0, 0.0, 0.0)):
    q = np.abs(p - np.asarray(center, dtype=np.float64)) - np.asarray(half_extents)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside - radius


def smooth_union(a, b, k):
    """Polynomial smooth minimum; blends two SDFs over a band of width k."""
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1.0 - h) + a * h - k * h * (1.0 - h)


_PRIMITIVES = ("sphere", "torus", "rounded_box", "smooth_union", "empty")


def sdf_from_spec(spec: dict):
    """Build a vectorized SDF callable from a primitive specification dict."""
    kind = spec.get("kind")
    if kind == "sphere":
        radius = float(spec["radius"])
        center = tuple(spec.get("center", (0.0, 0.0, 0.0)))
        return lambda p: sdf_sphere(p, radius, center)
    if kind == "torus":
        major, minor = float(spec["major"]), float(spec["minor"])
        center = tuple(spec.get("center", (0.0, 0.0, 0.0)))
        return lambda p: sdf_torus(p, major, minor, center)
    if kind == "rounded_box":
        half = np.asarray(spec["half_extents"], dtype=np.float64)
        radius = float(spec.get("radius", 0.0))
        center = tuple(spec.get("center", (0.0, 0.0, 0.0)))
        return lambda p: sdf_rounded_box(p, half, radius, center)
    if kind == "smooth_union":
        parts = [sdf_from_spec(s) for s in spec["parts"]]
        if len(parts) < 2:
            raise InvalidInputError("smooth_union needs at least two parts")
        k = float(spec.get("k", 0.05))

        def compound(p):
            f = parts[0](p)
            for part in parts[1:]:
                f = smooth_union(f, part(p), k)
            return f

        return compound
    if kind == "empty":
        return lambda p: np.ones(np.asarray(p).shape[:-1])
    raise InvalidInputError(f"unknown primitive kind {kind!r} (expected one of {_PRIMITIVES})")


def sdf_gradient(sdf, p, step: float = _GRAD_STEP) -> np.ndarray:
    """Central-difference gradient of an SDF callable at points p (..., 3)."""
    p = np.asarray(p, dtype=np.float64)
    g = np.empty_like(p)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = step
        g[..., axis] = (sdf(p + e) - sdf(p - e)) / (2.0 * step)
    return g


def sdf_normal_analytic(sdf, p) -> np.ndarray:
    g = sdf_gradient(sdf, p)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# environment light


class Environment:
    def eval(self, dirs) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class GaussianLobeEnvironment(Environment):
    """Ambient color plus von Mises-Fisher-style lobes: always nonnegative."""

    ambient: np.ndarray
    axes: np.ndarray
    sharpness: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)
        self.axes = np.asarray(self.axes, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(self.axes, axis=-1, keepdims=True)
        self.axes = self.axes / np.where(norms == 0.0, 1.0, norms)
        self.sharpness = np.asarray(self.sharpness, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if not (len(self.axes) == len(self.sharpness) == len(self.colors)):
            raise InvalidInputError("lobe arrays must share a length")

    def eval(self, dirs) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.float64)
        out = np.broadcast_to(self.ambient, dirs.shape[:-1] + (3,)).copy()
        for axis, kappa, color in zip(self.axes, self.sharpness, self.colors):
            w = np.exp(kappa * (dirs @ axis - 1.0))
            out = out + w[..., None] * color
        return out

    def to_dict(self) -> dict:
        return {"kind": "lobes", "ambient": self.ambient.tolist(),
                "lobes": [{"axis": a.tolist(), "sharpness": float(s), "color": c.tolist()}
                          for a, s, c in zip(self.axes, self.sharpness, self.colors)]}


@dataclass
class SHEnvironment(Environment):
    """Real spherical-harmonic environment, clamped to >= 0 at evaluation."""

    coeffs: np.ndarray  # (n_coeff, 3)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1, 3)

    def eval(self, dirs) -> np.ndarray:
        from .fields import sh_basis  # shared basis, avoids circular import at module load
        degree = int(np.sqrt(self.coeffs.shape[0])) - 1
        y = sh_basis(np.asarray(dirs, dtype=np.float64), degree)
        return np.maximum(y @ self.coeffs, 0.0)

    def to_dict(self) -> dict:
        return {"kind": "sh", "coeffs": self.coeffs.tolist()}


def environment_from_spec(spec: dict) -> Environment:
    kind = spec.get("kind")
    if kind == "lobes":
        lobes = spec.get("lobes", [])
        return GaussianLobeEnvironment(
            np.asarray(spec.get("ambient", (0.0, 0.0, 0.0))),
            np.array([l["axis"] for l in lobes]).reshape(-1, 3),
            np.array([l["sharpness"] for l in lobes]),
            np.array([l["color"] for l in lobes]).reshape(-1, 3))
    if kind == "sh":
        return SHEnvironment(np.asarray(spec["coeffs"]))
    raise InvalidInputError(f"unknown environment kind {kind!r}")


# ---------------------------------------------------------------------------
# cameras and the Scene container


def cameras_from_spec(spec: dict) -> list:
    kind = spec.get("kind")
    if kind == "fibonacci":
        return fibonacci_cameras(int(spec["count"]), float(spec.get("radius", 2.5)),
                                 float(spec.get("fov_deg", 30.0)),
                                 int(spec.get("image_size", 64)),
                                 int(spec.get("image_size", 64)))
    if kind == "ring":
        return ring_cameras(int(spec["count"]), float(spec.get("radius", 2.5)),
                            float(spec.get("elevation_deg", 20.0)),
                            float(spec.get("fov_deg", 30.0)),
                            int(spec.get("image_size", 64)),
                            int(spec.get("image_size", 64)))
    if kind == "lookat_list":
        size = int(spec.get("image_size", 64))
        return [look_at_camera(e["eye"], fov_deg=float(e.get("fov_deg", 30.0)),
                               width=size, height=size)
                for e in spec["eyes"]]
    if kind == "explicit":
        return [Camera.from_dict(d) for d in spec["cameras"]]
    raise InvalidInputError(f"unknown camera kind {kind!r}")


@dataclass
class Scene:
    """Analytic scene: SDF callable, material, environment and cameras."""

    sdf: object
    material: Material
    environment: Environment
    cameras: list
    spec: dict = field(default_factory=dict)

    @classmethod
    def from_spec(cls, spec: dict) -> "Scene":
        return cls(
            sdf=sdf_from_spec(spec["primitive"]),
            material=Material.from_dict(spec["material"]),
            environment=environment_from_spec(spec["environment"]),
            cameras=cameras_from_spec(spec["cameras"]),
            spec=spec,
        )
