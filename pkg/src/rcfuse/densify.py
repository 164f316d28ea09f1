"""Dense pseudo-point clouds from fitted instance surfaces."""
from __future__ import annotations

import numpy as np

from .geometry import InstanceMask, PinholeCamera, RigidTransform
from .pillars import BevGridSpec, pillar_offsets
from .surface_fit import SurfaceCoefficients, evaluate_surface, extract_bbox


def lattice_pixels(mask: InstanceMask, stride: int = 1) -> np.ndarray:
    """Mask pixels on the stride lattice anchored at the bbox origin."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return mask.pixels
    box = extract_bbox(mask)
    px = mask.pixels
    on = ((px[:, 0] - box.u1) % stride == 0) & ((px[:, 1] - box.v1) % stride == 0)
    return px[on]


def densify_instance(mask: InstanceMask, rho: SurfaceCoefficients, cam: PinholeCamera,
                     t_cam_to_radar: RigidTransform, stride: int = 1,
                     depth_range: tuple[float, float] = (0.0, 69.12)) -> np.ndarray:
    """Unproject fitted depths of the lattice pixels into the radar frame.

    Pixels whose fitted depth falls outside ``depth_range`` (inclusive) or is
    not strictly positive are dropped. Returns ``(N, 3)`` float64.
    """
    px = lattice_pixels(mask, stride)
    if len(px) == 0:
        return np.zeros((0, 3))
    d = np.asarray(evaluate_surface(rho, px[:, 0], px[:, 1]), dtype=np.float64).reshape(-1)
    lo, hi = depth_range
    ok = (d >= lo) & (d <= hi) & (d > 0)
    if not np.any(ok):
        return np.zeros((0, 3))
    pts_cam = cam.unproject(px[ok, 0], px[ok, 1], d[ok])
    return t_cam_to_radar.apply(pts_cam)


def densify_frame(masks, coefficients, cam, t_cam_to_radar, stride=1, depth_range=(0.0, 69.12)) -> np.ndarray:
    """Concatenate per-instance pseudo-points in the given instance order."""
    parts = [densify_instance(m, c, cam, t_cam_to_radar, stride, depth_range)
             for m, c in zip(masks, coefficients) if c is not None]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))


def augment_points(points, grid: BevGridSpec) -> np.ndarray:
    """Pseudo-point attributes ``[x, y, z, x_c, y_c, z_c, x_p, y_p]``, shape ``(N, 8)``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.column_stack([p, pillar_offsets(p, grid)])
