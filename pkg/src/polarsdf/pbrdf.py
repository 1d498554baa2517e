"""Polarimetric BRDF ingredients: Fresnel coefficient pairs, GGX microfacet
terms, and the diffuse/specular Stokes bases.

Sign conventions follow the physics of a dielectric interface: s-polarised
light reflects more than p (R_minus = (R_s - R_p)/2 >= 0) and therefore
transmits less (T_minus = (T_s - T_p)/2 = -R_minus <= 0).  With these signs
the diffuse and specular Stokes bases evaluated at the same azimuth produce
angles of polarization exactly pi/2 apart, which is the origin of the
ambiguity the tangent machinery absorbs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BackfacingError, InvalidInputError
from .polarimetry import wrap_aop


@dataclass
class FresnelReflection:
    r_plus: np.ndarray
    r_minus: np.ndarray
    r_s: np.ndarray
    r_p: np.ndarray


@dataclass
class FresnelTransmission:
    t_plus: np.ndarray
    t_minus: np.ndarray
    t_s: np.ndarray
    t_p: np.ndarray


@dataclass
class Material:
    """Dielectric material: RGB albedo, GGX roughness, refractive index."""

    albedo: np.ndarray
    roughness: float
    eta: float = 1.5

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(self.albedo < 0.0) or np.any(self.albedo > 1.0):
            raise InvalidInputError("albedo components must lie in [0, 1]")
        if not 0.0 < self.roughness <= 1.0:
            raise InvalidInputError("roughness must lie in (0, 1]")
        if self.eta <= 1.0:
            raise InvalidInputError("refractive index must exceed 1")

    def to_dict(self):
        return {"albedo": self.albedo.tolist(), "roughness": float(self.roughness),
                "eta": float(self.eta)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["albedo"]), float(d["roughness"]), float(d.get("eta", 1.5)))


def fresnel_reflection(cos_theta, eta: float) -> FresnelReflection:
    """Unpolarized-basis Fresnel reflection for external incidence (air -> eta).

    Entering the denser medium, total internal reflection cannot occur.
    """
    c = np.asarray(cos_theta, dtype=np.float64)
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise InvalidInputError("cos(theta) must lie in [0, 1]")
    if eta <= 1.0:
        raise InvalidInputError("eta must exceed 1")
    sin2 = 1.0 - c * c
    ct = np.sqrt(eta * eta - sin2) / eta  # cos of refraction angle
    rs = (c - eta * ct) / (c + eta * ct)
    rp = (eta * c - ct) / (eta * c + ct)
    r_s, r_p = rs * rs, rp * rp
    return FresnelReflection(0.5 * (r_s + r_p), 0.5 * (r_s - r_p), r_s, r_p)


def fresnel_transmission(cos_theta, eta: float) -> FresnelTransmission:
    """Intensity transmission T = 1 - R per component; T_minus <= 0."""
    r = fresnel_reflection(cos_theta, eta)
    t_s, t_p = 1.0 - r.r_s, 1.0 - r.r_p
    return FresnelTransmission(0.5 * (t_s + t_p), 0.5 * (t_s - t_p), t_s, t_p)


def brewster_angle(eta: float) -> float:
    return float(np.arctan(eta))


def microfacet_d(n_dot_h, roughness) -> np.ndarray:
    """GGX normal distribution with alpha = roughness**2."""
    if np.any(np.asarray(roughness) <= 0.0):
        raise InvalidInputError("roughness must be positive")
    m = np.asarray(n_dot_h, dtype=np.float64)
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise InvalidInputError("n.h must lie in [0, 1]")
    a2 = np.asarray(roughness, dtype=np.float64) ** 4
    denom = m * m * (a2 - 1.0) + 1.0
    return a2 / (np.pi * denom * denom)


def microfacet_g(n_dot_l, n_dot_v, roughness) -> np.ndarray:
    """Smith height-correlated masking-shadowing for GGX."""
    mu_i = np.asarray(n_dot_l, dtype=np.float64)
    mu_o = np.asarray(n_dot_v, dtype=np.float64)
    a2 = np.asarray(roughness, dtype=np.float64) ** 4
    lam_i = mu_o * np.sqrt(a2 + (1.0 - a2) * mu_i * mu_i)
    lam_o = mu_i * np.sqrt(a2 + (1.0 - a2) * mu_o * mu_o)
    denom = lam_i + lam_o
    return np.where(denom > 0.0, 2.0 * mu_i * mu_o / np.where(denom > 0.0, denom, 1.0), 0.0)


def diffuse_stokes_basis(l_d, phi_n, t_out: FresnelTransmission) -> np.ndarray:
    """Diffuse Stokes column: L_d * [T+, T- cos 2phi, -T- sin 2phi, 0].

    l_d has a trailing channel axis; output appends a Stokes axis of 4.
    """
    l_d = np.atleast_1d(np.asarray(l_d, dtype=np.float64))
    if np.any(l_d < 0.0):
        raise InvalidInputError("diffuse radiance must be nonnegative")
    c2 = np.cos(2.0 * np.asarray(phi_n, dtype=np.float64))
    s2 = np.sin(2.0 * np.asarray(phi_n, dtype=np.float64))
    return _polarized_column(l_d, t_out.t_plus, t_out.t_minus, c2, s2)


def specular_stokes_basis(l_s, phi_h, refl: FresnelReflection) -> np.ndarray:
    """Specular Stokes column: L_s * [R+, R- cos 2phi, -R- sin 2phi, 0]."""
    l_s = np.atleast_1d(np.asarray(l_s, dtype=np.float64))
    if np.any(l_s < 0.0):
        raise InvalidInputError("specular radiance must be nonnegative")
    c2 = np.cos(2.0 * np.asarray(phi_h, dtype=np.float64))
    s2 = np.sin(2.0 * np.asarray(phi_h, dtype=np.float64))
    return _polarized_column(l_s, refl.r_plus, refl.r_minus, c2, s2)


def _polarized_column(scale, plus, minus, cos2phi, sin2phi) -> np.ndarray:
    """scale (..., C) times the Stokes column [plus, minus*c2, -minus*s2, 0]."""
    scale = np.asarray(scale, dtype=np.float64)
    plus = _bcast(plus, scale)
    minus = _bcast(minus, scale)
    c2 = _bcast(cos2phi, scale)
    s2 = _bcast(sin2phi, scale)
    s0 = scale * plus
    s1 = scale * minus * c2
    s2c = -scale * minus * s2
    return np.stack([s0, s1, s2c, np.zeros_like(s0)], axis=-1)


def _bcast(x, like):
    """Broadcast a per-point scalar against a per-point-per-channel array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim and x.ndim == like.ndim - 1:
        return x[..., None]
    return x


def doubled_angle_factors(a, b, eps: float = 1e-12) -> tuple:
    """cos 2phi, sin 2phi for phi = atan2(b, a), smooth through a = b = 0.

    (a, b) are the components of the normal along the camera's r1, r2 rows;
    at a = b = 0 the polarized terms vanish anyway, so the factors fade to 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = a * a + b * b + eps
    return (a * a - b * b) / denom, 2.0 * a * b / denom


def point_stokes(n, v, l_d, l_s, material: Material, cam_r: np.ndarray) -> np.ndarray:
    """Outgoing Stokes vector per channel in the camera's horizontal/vertical
    basis, combining the diffuse and specular columns.

    n: unit surface normal(s) (..., 3); v: unit direction(s) from the surface
    point toward the camera; l_d, l_s: radiances (..., C).  The half-vector
    azimuth is collapsed to the normal azimuth and the specular Fresnel angle
    to acos(n.v), matching the single-lobe aggregation of the image formation
    model.  Output shape (..., C, 4).
    """
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    l_d = np.atleast_1d(np.asarray(l_d, dtype=np.float64))
    l_s = np.atleast_1d(np.asarray(l_s, dtype=np.float64))
    cos_o = np.sum(n * v, axis=-1)
    if np.any(cos_o <= 0.0):
        raise BackfacingError("n.v <= 0: surface faces away from the camera")
    cos_o = np.clip(cos_o, 0.0, 1.0)
    r1, r2 = cam_r[0], cam_r[1]
    a = n @ r1
    b = n @ r2
    c2, s2 = doubled_angle_factors(a, b)
    t_out = fresnel_transmission(cos_o, material.eta)
    refl = fresnel_reflection(cos_o, material.eta)
    diff = _polarized_column(l_d, t_out.t_plus, t_out.t_minus, c2, s2)
    spec = _polarized_column(l_s, refl.r_plus, refl.r_minus, c2, s2)
    return diff + spec


def normal_azimuth(n, cam_r: np.ndarray) -> np.ndarray:
    """Math-convention azimuth of n in the camera frame: atan2(r2.n, r1.n)."""
    n = np.asarray(n, dtype=np.float64)
    return np.arctan2(n @ cam_r[1], n @ cam_r[0])
