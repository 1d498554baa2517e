"""Stokes-vector algebra and angle-of-polarization extraction.

Stokes layout is [s0, s1, s2, s3] on the last axis: total intensity, 0/90
difference, 45/135 difference, circular.  The circular component is assumed
zero throughout; loaders reject files that violate this.  AoP is canonically
wrapped into [0, pi).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePolarizationError, InvalidInputError

DOP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class StokesVector:
    """Single Stokes vector; array pipelines use plain (..., 4) ndarrays."""

    s0: float
    s1: float
    s2: float
    s3: float = 0.0

    def __post_init__(self):
        validate_stokes(self.as_array())

    def as_array(self) -> np.ndarray:
        return np.array([self.s0, self.s1, self.s2, self.s3], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "StokesVector":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @property
    def dop(self) -> float:
        return float(np.hypot(self.s1, self.s2) / self.s0) if self.s0 > 0 else 0.0


def validate_stokes(s: np.ndarray):
    """Check finiteness, s3 == 0 and degree of polarization <= 1."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != 4:
        raise InvalidInputError(f"Stokes arrays need a trailing axis of 4, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("non-finite Stokes component")
    if np.any(s[..., 3] != 0.0):
        raise InvalidInputError("nonzero circular component s3")
    pol = np.hypot(s[..., 1], s[..., 2])
    if np.any(pol > s[..., 0] + DOP_TOLERANCE):
        worst = float((pol - s[..., 0]).max())
        raise InvalidInputError(f"degree of polarization above 1 (excess {worst:.3e})")


def stokes_from_intensities(i0, i45, i90, i135) -> np.ndarray:
    """Four polarizer-angle intensities -> Stokes (..., 4); s3 pinned to 0."""
    arrs = [np.asarray(x, dtype=np.float64) for x in (i0, i45, i90, i135)]
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("non-finite polarizer intensity")
        if np.any(a < 0.0):
            raise InvalidInputError("negative polarizer intensity")
    i0, i45, i90, i135 = np.broadcast_arrays(*arrs)
    s0 = 0.5 * (i0 + i45 + i90 + i135)
    s1 = i0 - i90
    s2 = i45 - i135
    return np.stack([s0, s1, s2, np.zeros_like(s0)], axis=-1)


def intensities_from_stokes(s) -> tuple:
    """Analyzer model I_theta = (s0 + s1 cos2theta + s2 sin2theta) / 2.

    Exact inverse of stokes_from_intensities for any valid Stokes input.
    """
    s = np.asarray(s, dtype=np.float64)
    validate_stokes(s)
    s0, s1, s2 = s[..., 0], s[..., 1], s[..., 2]
    i0 = 0.5 * (s0 + s1)
    i45 = 0.5 * (s0 + s2)
    i90 = 0.5 * (s0 - s1)
    i135 = 0.5 * (s0 - s2)
    return i0, i45, i90, i135


def analyzer_intensity(s, theta) -> np.ndarray:
    """Intensity behind an ideal linear polarizer at angle theta."""
    s = np.asarray(s, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    return 0.5 * (s[..., 0] + s[..., 1] * np.cos(2 * theta) + s[..., 2] * np.sin(2 * theta))


def wrap_aop(angle) -> np.ndarray:
    """Wrap angles into the canonical AoP range [0, pi)."""
    a = np.mod(np.asarray(angle, dtype=np.float64), np.pi)
    # mod can round a tiny negative up to pi exactly; pi == 0 on this circle
    return np.where(a >= np.pi, 0.0, a)


def aop(s) -> np.ndarray:
    """Angle of polarization: atan2(s2, s1) / 2, wrapped into [0, pi).

    Raises on exactly unpolarized input (s1 == s2 == 0); array pipelines that
    want mask-out semantics instead should use aop_map.
    """
    s = np.asarray(s, dtype=np.float64)
    s1, s2 = s[..., 1], s[..., 2]
    if np.any((s1 == 0.0) & (s2 == 0.0)):
        raise DegeneratePolarizationError("s1 == s2 == 0: angle of polarization undefined")
    return wrap_aop(0.5 * np.arctan2(s2, s1))


def aop_map(s, dop_threshold: float = 1e-6) -> tuple:
    """Per-pixel AoP plus a validity mask (False where DoP is negligible)."""
    s = np.asarray(s, dtype=np.float64)
    s0, s1, s2 = s[..., 0], s[..., 1], s[..., 2]
    pol = np.hypot(s1, s2)
    valid = pol > dop_threshold * np.maximum(s0, 1e-30)
    angles = np.where(valid, wrap_aop(0.5 * np.arctan2(s2, np.where(valid, s1, 1.0))), 0.0)
    return angles, valid


@dataclass
class AoPMap:
    """Per-pixel polarization angle in [0, pi) with a validity mask."""

    angles: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.angles.shape != self.valid.shape:
            raise InvalidInputError("AoP map and validity mask shapes differ")
        inside = self.angles[self.valid]
        if inside.size and (np.any(inside < 0.0) or np.any(inside >= np.pi)):
            raise InvalidInputError("AoP values outside [0, pi)")


@dataclass
class PolarizedImage:
    """Per-pixel Stokes vectors for each color channel plus a silhouette mask.

    stokes has shape (H, W, C, 4) with C in {1, 3}; mask is (H, W) bool.
    """

    stokes: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.stokes = np.asarray(self.stokes, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.stokes.ndim != 4 or self.stokes.shape[-1] != 4:
            raise InvalidInputError(f"stokes must be (H, W, C, 4), got {self.stokes.shape}")
        if self.stokes.shape[2] not in (1, 3):
            raise InvalidInputError("channel count must be 1 or 3")
        if self.mask.shape != self.stokes.shape[:2]:
            raise InvalidInputError("mask dimensions differ from image dimensions")
        if np.any(self.stokes[..., 3] != 0.0):
            raise InvalidInputError("nonzero circular component s3")
        if not np.all(np.isfinite(self.stokes[self.mask])):
            raise InvalidInputError("non-finite Stokes values inside the mask")

    @property
    def height(self):
        return self.stokes.shape[0]

    @property
    def width(self):
        return self.stokes.shape[1]

    @property
    def channels(self):
        return self.stokes.shape[2]

    def gray(self) -> np.ndarray:
        """Channel-summed Stokes image (H, W, 4)."""
        return self.stokes.sum(axis=2)
