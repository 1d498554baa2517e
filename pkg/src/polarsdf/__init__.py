"""polarsdf: sparse-view reflective-surface reconstruction from polarized
images — a polarimetric forward renderer plus an SDF-grid inverse renderer
optimizing photometric (Stokes), geometric (azimuth-tangent), mask and Eikonal
losses."""

from . import _tuning  # allocator tuning; idempotent side-effect import

__version__ = "0.1.0"
