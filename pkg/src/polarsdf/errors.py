"""Exception hierarchy shared across the package.

CLI exit codes: InvalidInputError family -> 2, NumericalFailure -> 3.
"""


class PolarSDFError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PolarSDFError):
    """Input violates a documented precondition or schema."""


class DegeneratePolarizationError(InvalidInputError):
    """AoP requested for a Stokes vector with s1 == s2 == 0."""


class BehindCameraError(InvalidInputError):
    """Projection of a point with non-positive camera-frame depth."""


class AmbiguousNormalError(PolarSDFError):
    """Tangent system has rank < 2; carries the 2D null-space basis."""

    def __init__(self, message, null_basis=None):
        super().__init__(message)
        self.null_basis = null_basis


class DegenerateNormalError(PolarSDFError):
    """SDF gradient too small to define a unit normal."""


class BackfacingError(InvalidInputError):
    """Shading requested for a normal facing away from the viewer."""


class EmptySurfaceError(PolarSDFError):
    """Isosurface extraction on a single-sign grid."""


class DomainError(PolarSDFError):
    """Tape op evaluated outside its domain (NaN guard)."""

    def __init__(self, op, detail):
        super().__init__(f"domain violation in op '{op}': {detail}")
        self.op = op


class TapeGenerationError(PolarSDFError):
    """Var used with a tape it does not belong to."""


class NumericalFailure(PolarSDFError):
    """Optimization or rendering produced non-finite results."""
