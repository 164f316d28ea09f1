"""Camera and 4D-radar fusion preprocessing with surface-fitting depth densification."""
from .errors import InvariantViolation, RcfuseError
from .geometry import InstanceMask, PinholeCamera, ReferencePointSet, RigidTransform
from .pillars import GRIDS, TJ4D_GRID, VOD_GRID, BevGridSpec, BevTensor, PillarTensor, pillarize, scatter_max
from .surface_fit import BBox2D, FitConfig, SurfaceCoefficients, fit_surface

__version__ = "0.1.0"

__all__ = [
    "BBox2D", "BevGridSpec", "BevTensor", "FitConfig", "GRIDS", "InstanceMask", "InvariantViolation",
    "PillarTensor", "PinholeCamera", "RcfuseError", "ReferencePointSet", "RigidTransform",
    "SurfaceCoefficients", "TJ4D_GRID", "VOD_GRID", "fit_surface", "pillarize", "scatter_max",
]
