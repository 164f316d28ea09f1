"""Rigid transforms, pinhole projection and mask-membership filtering.

Frame conventions used throughout the package:

* camera frame: x right, y down, z forward (optical axis); pixel ``u`` grows
  with x and ``v`` with y.
* radar / ego frame: whatever the calibration says; the default synthetic
  rig is x forward, y left, z up.

Pixel ``(u, v)`` with integer coordinates covers the continuous square
``[u, u+1) x [v, v+1)``; continuous coordinates are floored to find the
containing pixel.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import NonPositiveDepth

ROTATION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) transform ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("transform contains non-finite values")
        err = rotation_error(rot)
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not a proper rotation (error {err:.3g})")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def about_z(cls, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform a single 3-point or an ``(N, 3)`` array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self o other`` (``other`` is applied first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def rotation_error(rot: np.ndarray) -> float:
    """Max deviation of ``rot`` from orthonormality and unit determinant."""
    ortho = np.max(np.abs(rot.T @ rot - np.eye(3)))
    return float(max(ortho, abs(np.linalg.det(rot) - 1.0)))


def apply_transform(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float, width: int | None = None, height: int | None = None) -> "PinholeCamera":
        """Intrinsics for an image resampled by ``factor`` (0.125 for a 1/8 feature map)."""
        w = width if width is not None else max(1, int(round(self.width * factor)))
        h = height if height is not None else max(1, int(round(self.height * factor)))
        return PinholeCamera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor, w, h)

    def project_points(self, points):
        """Vectorised projection without raising.

        Returns ``(uvd, valid)`` where ``uvd`` is ``(N, 3)`` and ``valid``
        flags points with strictly positive depth. Invalid rows hold NaN.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        z = p[:, 2]
        valid = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[:, 0] / z + self.cx
            v = self.fy * p[:, 1] / z + self.cy
        uvd = np.stack([u, v, z], axis=1)
        uvd[~valid] = np.nan
        return uvd, valid

    def project(self, p):
        """Project camera-frame point(s); raises :class:`NonPositiveDepth` if any z <= 0."""
        arr = np.asarray(p, dtype=np.float64)
        uvd, valid = self.project_points(arr)
        if not np.all(valid):
            raise NonPositiveDepth("point lies behind or on the camera plane")
        if arr.ndim == 1:
            return float(uvd[0, 0]), float(uvd[0, 1]), float(uvd[0, 2])
        return uvd

    def unproject(self, u, v, d) -> np.ndarray:
        """Inverse of :meth:`project`. Scalars give a 3-vector, arrays an ``(N, 3)`` array."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        if np.any(~(d > 0)):
            raise NonPositiveDepth("depth must be positive")
        x = (u - self.cx) * d / self.fx
        y = (v - self.cy) * d / self.fy
        return np.stack(np.broadcast_arrays(x, y, d), axis=-1)

    def rays(self, u, v) -> np.ndarray:
        """Ray directions with unit z component through pixel coordinates."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        x = (u - self.cx) / self.fx
        y = (v - self.cy) / self.fy
        return np.stack(np.broadcast_arrays(x, y, np.ones_like(x)), axis=-1)

    def in_image(self, u, v) -> np.ndarray:
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


def project(cam: PinholeCamera, p_cam):
    return cam.project(p_cam)


def unproject(cam: PinholeCamera, u, v, d):
    return cam.unproject(u, v, d)


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """A single instance's pixel set.

    ``pixels`` is an ``(N, 2)`` int array of ``(u, v)``, stored sorted in
    row-major order (by ``v`` then ``u``) and deduplicated.
    """

    instance_id: int
    pixels: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        if int(self.instance_id) <= 0:
            raise ValueError("instance_id must be a positive integer")
        w, h = (int(x) for x in self.image_size)
        px = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(px):
            if px[:, 0].min() < 0 or px[:, 0].max() >= w or px[:, 1].min() < 0 or px[:, 1].max() >= h:
                raise ValueError("mask pixels outside image bounds")
            lin = np.unique(px[:, 1] * w + px[:, 0])
            px = np.stack([lin % w, lin // w], axis=1)
        px.setflags(write=False)
        object.__setattr__(self, "instance_id", int(self.instance_id))
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "image_size", (w, h))

    @classmethod
    def from_bool(cls, instance_id: int, image) -> "InstanceMask":
        image = np.asarray(image, dtype=bool)
        v, u = np.nonzero(image)
        return cls(instance_id, np.stack([u, v], axis=1), (image.shape[1], image.shape[0]))

    def __len__(self):
        return len(self.pixels)

    @property
    def u(self) -> np.ndarray:
        return self.pixels[:, 0]

    @property
    def v(self) -> np.ndarray:
        return self.pixels[:, 1]

    @cached_property
    def bool_image(self) -> np.ndarray:
        w, h = self.image_size
        img = np.zeros((h, w), dtype=bool)
        img[self.pixels[:, 1], self.pixels[:, 0]] = True
        img.setflags(write=False)
        return img

    def contains(self, u, v) -> np.ndarray:
        """Membership test for continuous coordinates (floored to pixels)."""
        w, h = self.image_size
        ui = np.floor(np.asarray(u, dtype=np.float64))
        vi = np.floor(np.asarray(v, dtype=np.float64))
        inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        out = np.zeros(np.shape(ui), dtype=bool)
        out[inside] = self.bool_image[vi[inside].astype(np.int64), ui[inside].astype(np.int64)]
        return out


@dataclass(frozen=True, eq=False)
class ReferencePointSet:
    """Sparse depth references ``(u, v, d)`` for one instance, as an ``(N, 3)`` array."""

    uvd: np.ndarray

    def __post_init__(self):
        arr = np.array(self.uvd, dtype=np.float64).reshape(-1, 3)
        if len(arr) and not np.all(arr[:, 2] > 0):
            raise ValueError("reference depths must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "uvd", arr)

    @classmethod
    def empty(cls) -> "ReferencePointSet":
        return cls(np.zeros((0, 3)))

    def __len__(self):
        return len(self.uvd)

    @property
    def u(self) -> np.ndarray:
        return self.uvd[:, 0]

    @property
    def v(self) -> np.ndarray:
        return self.uvd[:, 1]

    @property
    def d(self) -> np.ndarray:
        return self.uvd[:, 2]

    def scaled(self, k: float) -> "ReferencePointSet":
        return ReferencePointSet(self.uvd * np.array([1.0, 1.0, k]))


def collect_reference_points(points, t_radar_to_cam: RigidTransform, cam: PinholeCamera,
                             mask: InstanceMask) -> ReferencePointSet:
    """Keep radar points whose projection lands inside ``mask``.

    Points behind the camera (z <= 0) and points projecting outside the
    image are silently dropped. The returned coordinates are the continuous
    projections, in input order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return ReferencePointSet.empty()
    uvd, valid = cam.project_points(t_radar_to_cam.apply(pts))
    keep = valid.copy()
    u, v = uvd[valid, 0], uvd[valid, 1]
    keep[valid] = cam.in_image(np.floor(u), np.floor(v)) & mask.contains(u, v)
    return ReferencePointSet(uvd[keep])
