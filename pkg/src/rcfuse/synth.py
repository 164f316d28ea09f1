"""Synthetic scenes with analytically known depth, used as ground truth.

Objects live in image/camera space:

* ``PlanePatch``: depth linear in pixel coordinates over a pixel rectangle
  (a fronto-parallel plane when both gradients are zero).
* ``QuadraticPatch``: depth given by known surface coefficients over a
  pixel rectangle.
* ``SphericalCap``: the camera-facing part of a 3D sphere, cut by a plane
  orthogonal to ``axis``; no pixel-space quadratic reproduces it exactly.

Depth is rendered per integer pixel coordinate ``(u, v)`` by ray/surface
intersection and composited nearest-wins.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateSpec, InvalidSpec, MaskTooSmall
from .geometry import InstanceMask, PinholeCamera, ReferencePointSet, RigidTransform
from .pillars import SCHEMAS, RadarSchema, TJ4D
from .surface_fit import SurfaceCoefficients, evaluate_surface

DEFAULT_CAMERA = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)
# radar x forward / y left / z up  ->  camera x right / y down / z forward
RADAR_TO_CAMERA = RigidTransform(np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]), np.zeros(3))


def _clip_window(extent, cam: PinholeCamera):
    """Inclusive pixel window clipped to the image, or None when empty."""
    u1, v1, u2, v2 = (int(np.floor(x)) for x in extent)
    u1, v1 = max(u1, 0), max(v1, 0)
    u2, v2 = min(u2, cam.width - 1), min(v2, cam.height - 1)
    if u2 < u1 or v2 < v1:
        return None
    return u1, v1, u2, v2


def _render_window(depth_fn, extent, cam: PinholeCamera) -> np.ndarray:
    """Evaluate ``depth_fn(u, v)`` on the window's pixels; NaN elsewhere and where depth <= 0."""
    out = np.full((cam.height, cam.width), np.nan)
    win = _clip_window(extent, cam)
    if win is None:
        return out
    u1, v1, u2, v2 = win
    v, u = np.mgrid[v1:v2 + 1, u1:u2 + 1]
    d = np.asarray(depth_fn(u.astype(np.float64), v.astype(np.float64)), dtype=np.float64)
    with np.errstate(invalid="ignore"):
        out[v1:v2 + 1, u1:u2 + 1] = np.where(d > 0, d, np.nan)
    return out


@dataclass(frozen=True)
class PlanePatch:
    depth: float
    extent: tuple[int, int, int, int]
    grad_u: float = 0.0
    grad_v: float = 0.0

    kind = "plane"

    def depth_at(self, u, v, cam: PinholeCamera):
        u1, v1, u2, v2 = self.extent
        uc, vc = (u1 + u2) / 2.0, (v1 + v2) / 2.0
        return self.depth + self.grad_u * (np.asarray(u) - uc) + self.grad_v * (np.asarray(v) - vc)

    def render(self, cam: PinholeCamera) -> np.ndarray:
        return _render_window(lambda u, v: self.depth_at(u, v, cam), self.extent, cam)


@dataclass(frozen=True, eq=False)
class QuadraticPatch:
    surface: SurfaceCoefficients
    extent: tuple[int, int, int, int]

    kind = "quadratic"

    def depth_at(self, u, v, cam: PinholeCamera):
        return evaluate_surface(self.surface, u, v)

    def render(self, cam: PinholeCamera) -> np.ndarray:
        return _render_window(lambda u, v: evaluate_surface(self.surface, u, v), self.extent, cam)


@dataclass(frozen=True, eq=False)
class SphericalCap:
    """Sphere ``|X - center| = radius`` (camera frame), front intersection only.

    A surface point belongs to the cap when its angle from ``axis`` (seen
    from the centre) is at most ``half_angle``. ``axis`` defaults to the
    direction from the centre towards the camera.
    """

    center: np.ndarray
    radius: float
    axis: np.ndarray | None = None
    half_angle: float = np.pi / 2
    extent: tuple[int, int, int, int] | None = None

    kind = "sphere"

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)
        ax = -c if self.axis is None else np.asarray(self.axis, dtype=np.float64).reshape(3)
        nrm = np.linalg.norm(ax)
        if nrm == 0:
            raise ValueError("cap axis must be non-zero")
        object.__setattr__(self, "axis", ax / nrm)
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def depth_at(self, u, v, cam: PinholeCamera):
        r = cam.rays(u, v)
        a = np.einsum("...i,...i->...", r, r)
        b = r @ self.center
        c = self.center @ self.center - self.radius ** 2
        disc = b * b - a * c
        with np.errstate(invalid="ignore"):
            t = (b - np.sqrt(disc)) / a
        p = t[..., None] * r
        on_cap = (p - self.center) @ self.axis >= self.radius * np.cos(self.half_angle) - 1e-12
        ok = (disc >= 0) & (t > 0) & on_cap
        return np.where(ok, t, np.nan)

    def image_bounds(self, cam: PinholeCamera):
        """Conservative pixel window of the sphere's silhouette."""
        corners = self.center + self.radius * np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        if np.any(corners[:, 2] <= 0):
            return (0, 0, cam.width - 1, cam.height - 1)
        uvd = cam.project(corners)
        return (uvd[:, 0].min() - 1, uvd[:, 1].min() - 1, uvd[:, 0].max() + 1, uvd[:, 1].max() + 1)

    def render(self, cam: PinholeCamera) -> np.ndarray:
        u1, v1, u2, v2 = self.image_bounds(cam)
        if self.extent is not None:
            e = self.extent
            u1, v1, u2, v2 = max(u1, e[0]), max(v1, e[1]), min(u2, e[2]), min(v2, e[3])
        return _render_window(lambda u, v: self.depth_at(u, v, cam), (u1, v1, u2, v2), cam)

    def on_surface_error(self, pts) -> np.ndarray:
        return np.abs(np.linalg.norm(np.asarray(pts) - self.center, axis=-1) - self.radius)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    camera: PinholeCamera
    extrinsics: RigidTransform  # radar -> camera
    objects: tuple
    gt_depth: np.ndarray
    masks: list
    seed: int = 0
    radar: dict = field(default_factory=dict)


def generate_scene(objects: Sequence, camera: PinholeCamera = DEFAULT_CAMERA,
                   extrinsics: RigidTransform = RADAR_TO_CAMERA, seed: int = 0,
                   radar: dict | None = None) -> SyntheticScene:
    """Render ``objects`` and composite them nearest-surface-wins.

    Instance ids follow object order starting at 1. An object with no
    visible pixel raises :class:`DegenerateSpec`.
    """
    if len(objects) == 0:
        raise DegenerateSpec("scene needs at least one object")
    layers = np.stack([obj.render(camera) for obj in objects])
    for k, layer in enumerate(layers):
        if not np.any(np.isfinite(layer)):
            raise DegenerateSpec(f"object {k} ({objects[k].kind}) lies outside the camera frustum")
    filled = np.where(np.isfinite(layers), layers, np.inf)
    owner = np.argmin(filled, axis=0)
    gt = np.min(filled, axis=0)
    fg = np.isfinite(gt)
    gt = np.where(fg, gt, 0.0)
    masks = []
    for k in range(len(objects)):
        sel = fg & (owner == k)
        if not np.any(sel):
            raise DegenerateSpec(f"object {k} ({objects[k].kind}) is fully occluded")
        masks.append(InstanceMask.from_bool(k + 1, sel))
    return SyntheticScene(camera, extrinsics, tuple(objects), gt, masks, int(seed), dict(radar or {}))


def sample_radar(scene: SyntheticScene, instance: int, n: int, noise_sigma: float = 0.0,
                 seed: int = 0) -> ReferencePointSet:
    """Draw ``n`` distinct mask pixels of instance index ``instance`` with noisy gt depth."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mask = scene.masks[instance]
    if len(mask) < n:
        raise MaskTooSmall(f"instance {mask.instance_id} has {len(mask)} pixels, {n} requested")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(mask), size=n, replace=False)
    u, v = mask.u[pick], mask.v[pick]
    d = scene.gt_depth[v, u].copy()
    if noise_sigma > 0:
        d = d + rng.normal(0.0, noise_sigma, size=n)
    return ReferencePointSet(np.column_stack([u, v, d]))


def scene_radar_cloud(scene: SyntheticScene, n_per_instance: int, noise_sigma: float = 0.0,
                      seed: int = 0, schema: RadarSchema = TJ4D) -> np.ndarray:
    """Radar-frame cloud with ``n_per_instance`` returns per instance.

    Returns sit at pixel centres ``(u + 0.5, v + 0.5)`` so that flooring
    their reprojection recovers the sampled pixel despite float32 storage.
    Intensity and velocity channels are zero.
    """
    rng = np.random.default_rng(seed)
    cam = scene.camera
    cam_to_radar = scene.extrinsics.inverse()
    clouds = []
    for obj, mask in zip(scene.objects, scene.masks):
        n = min(n_per_instance, len(mask))
        if n == 0:
            continue
        pick = np.sort(rng.choice(len(mask), size=n, replace=False))
        u = mask.u[pick] + 0.5
        v = mask.v[pick] + 0.5
        d = np.asarray(obj.depth_at(u, v, cam), dtype=np.float64)
        bad = ~np.isfinite(d) | (d <= 0)
        d[bad] = scene.gt_depth[mask.v[pick][bad], mask.u[pick][bad]]
        u[bad] -= 0.5
        v[bad] -= 0.5
        if noise_sigma > 0:
            d = np.maximum(d + rng.normal(0.0, noise_sigma, size=n), 1e-3)
        xyz = cam_to_radar.apply(cam.unproject(u, v, d))
        clouds.append(xyz)
    xyz = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    out = np.zeros((len(xyz), schema.n_raw))
    out[:, :3] = xyz
    return out


# --- JSON scene specs -----------------------------------------------------

def _num(d: dict, key: str, path: str, default=None, positive=False) -> float:
    if key not in d:
        if default is None:
            raise InvalidSpec(f"{path}.{key}", "missing required value")
        return default
    try:
        val = float(d[key])
    except (TypeError, ValueError):
        raise InvalidSpec(f"{path}.{key}", f"expected a number, got {d[key]!r}") from None
    if not np.isfinite(val) or (positive and val <= 0):
        raise InvalidSpec(f"{path}.{key}", f"invalid value {d[key]!r}")
    return val


def _vec(d: dict, key: str, path: str, n: int, default=None):
    if key not in d:
        if default is None:
            raise InvalidSpec(f"{path}.{key}", "missing required value")
        return default
    try:
        arr = np.asarray(d[key], dtype=np.float64)
    except (TypeError, ValueError):
        raise InvalidSpec(f"{path}.{key}", "expected a numeric list") from None
    if arr.size != n or not np.all(np.isfinite(arr)):
        raise InvalidSpec(f"{path}.{key}", f"expected {n} finite numbers")
    return arr.reshape(-1)


def parse_scene_spec(spec: dict):
    """Validate a scene spec dict; returns ``(objects, camera, extrinsics, radar)``."""
    if not isinstance(spec, dict):
        raise InvalidSpec("<root>", "scene spec must be a JSON object")
    known = {"camera", "extrinsics", "objects", "radar"}
    for key in spec:
        if key not in known:
            raise InvalidSpec(key, "unknown key")
    cam_d = spec.get("camera", {})
    if not isinstance(cam_d, dict):
        raise InvalidSpec("camera", "expected an object")
    dc = DEFAULT_CAMERA
    try:
        camera = PinholeCamera(
            _num(cam_d, "fx", "camera", dc.fx, True), _num(cam_d, "fy", "camera", dc.fy, True),
            _num(cam_d, "cx", "camera", dc.cx), _num(cam_d, "cy", "camera", dc.cy),
            int(_num(cam_d, "width", "camera", dc.width, True)), int(_num(cam_d, "height", "camera", dc.height, True)))
    except ValueError as exc:
        if isinstance(exc, InvalidSpec):
            raise
        raise InvalidSpec("camera", str(exc)) from None

    ext_d = spec.get("extrinsics", {})
    if not isinstance(ext_d, dict):
        raise InvalidSpec("extrinsics", "expected an object")
    rot = _vec(ext_d, "rotation", "extrinsics", 9, RADAR_TO_CAMERA.rotation.ravel())
    trans = _vec(ext_d, "translation", "extrinsics", 3, np.zeros(3))
    try:
        extrinsics = RigidTransform(rot.reshape(3, 3), trans)
    except ValueError as exc:
        raise InvalidSpec("extrinsics.rotation", str(exc)) from None

    objs_d = spec.get("objects")
    if not isinstance(objs_d, list) or not objs_d:
        raise InvalidSpec("objects", "expected a non-empty list")
    objects = []
    for i, od in enumerate(objs_d):
        path = f"objects[{i}]"
        if not isinstance(od, dict):
            raise InvalidSpec(path, "expected an object")
        shape = od.get("shape")
        if shape == "plane":
            ext = tuple(int(x) for x in _vec(od, "extent", path, 4))
            objects.append(PlanePatch(_num(od, "depth", path, positive=True), ext,
                                      _num(od, "grad_u", path, 0.0), _num(od, "grad_v", path, 0.0)))
        elif shape == "quadratic":
            ext = tuple(int(x) for x in _vec(od, "extent", path, 4))
            u0, v0 = (ext[0] + ext[2]) / 2.0, (ext[1] + ext[3]) / 2.0
            s = float(max(ext[2] - ext[0], ext[3] - ext[1], 1))
            norm = _vec(od, "normalization", path, 3, np.array([u0, v0, s]))
            if norm[2] <= 0:
                raise InvalidSpec(f"{path}.normalization", "scale must be positive")
            objects.append(QuadraticPatch(SurfaceCoefficients(_vec(od, "rho", path, 6), "quadratic", 1.0, tuple(norm)), ext))
        elif shape == "sphere":
            ext = tuple(int(x) for x in _vec(od, "extent", path, 4)) if "extent" in od else None
            axis = _vec(od, "axis", path, 3) if "axis" in od else None
            if axis is not None and not np.any(axis):
                raise InvalidSpec(f"{path}.axis", "must be non-zero")
            objects.append(SphericalCap(_vec(od, "center", path, 3), _num(od, "radius", path, positive=True),
                                        axis, _num(od, "half_angle", path, np.pi / 2, True), ext))
        else:
            raise InvalidSpec(f"{path}.shape", f"unknown shape {shape!r}; expected plane, quadratic or sphere")
        for key in od:
            if key not in {"shape", "extent", "depth", "grad_u", "grad_v", "rho", "normalization",
                           "center", "radius", "axis", "half_angle"}:
                raise InvalidSpec(f"{path}.{key}", "unknown key")

    radar_d = spec.get("radar", {})
    if not isinstance(radar_d, dict):
        raise InvalidSpec("radar", "expected an object")
    schema = radar_d.get("schema", "tj4d")
    if schema not in SCHEMAS:
        raise InvalidSpec("radar.schema", f"unknown schema {schema!r}")
    radar = {
        "n_per_instance": int(_num(radar_d, "n_per_instance", "radar", 20, True)),
        "noise_sigma": _num(radar_d, "noise_sigma", "radar", 0.0),
        "schema": schema,
    }
    if radar["noise_sigma"] < 0:
        raise InvalidSpec("radar.noise_sigma", "must be >= 0")
    return objects, camera, extrinsics, radar


def scene_from_spec(spec: dict, seed: int = 0) -> SyntheticScene:
    objects, camera, extrinsics, radar = parse_scene_spec(spec)
    return generate_scene(objects, camera, extrinsics, seed, radar)


# --- seeded random instances -------------------------------------------------

def _random_extent(rng: np.random.Generator, cam: PinholeCamera, lo: int = 40, hi: int = 120):
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    u1 = int(rng.integers(0, cam.width - w))
    v1 = int(rng.integers(0, cam.height - h))
    return u1, v1, u1 + w - 1, v1 + h - 1


def random_quadratic_patch(rng: np.random.Generator, cam: PinholeCamera = DEFAULT_CAMERA) -> QuadraticPatch:
    ext = _random_extent(rng, cam)
    u0, v0 = (ext[0] + ext[2]) / 2.0, (ext[1] + ext[3]) / 2.0
    s = float(max(ext[2] - ext[0], ext[3] - ext[1], 1))
    # normalised coordinates stay within +-0.5, so this keeps depth > 0
    rho = np.r_[rng.uniform(-2.0, 2.0, 5), rng.uniform(5.0, 40.0)]
    return QuadraticPatch(SurfaceCoefficients(rho, "quadratic", 1.0, (u0, v0, s)), ext)


def random_plane_patch(rng: np.random.Generator, cam: PinholeCamera = DEFAULT_CAMERA,
                       slanted: bool = True) -> PlanePatch:
    ext = _random_extent(rng, cam)
    depth = float(rng.uniform(5.0, 40.0))
    if not slanted:
        return PlanePatch(depth, ext)
    g = rng.uniform(0.005, 0.02, 2) * rng.choice([-1.0, 1.0], 2)
    return PlanePatch(depth, ext, float(g[0]), float(g[1]))


def random_spherical_cap(rng: np.random.Generator, cam: PinholeCamera = DEFAULT_CAMERA) -> SphericalCap:
    """An off-axis cap: depth over it has both slant and curvature."""
    while True:
        z = rng.uniform(8.0, 20.0)
        u = rng.uniform(0.25, 0.75) * cam.width
        v = rng.uniform(0.25, 0.75) * cam.height
        center = cam.unproject(u, v, z)
        radius = rng.uniform(1.0, 2.5)
        view = -center / np.linalg.norm(center)
        # tilt the cap axis away from the viewing direction
        tmp = np.cross(view, rng.normal(size=3))
        tmp /= np.linalg.norm(tmp)
        tilt = rng.uniform(np.radians(20), np.radians(40))
        axis = np.cos(tilt) * view + np.sin(tilt) * tmp
        cap = SphericalCap(center, radius, axis, float(rng.uniform(np.radians(30), np.radians(45))))
        n_px = np.count_nonzero(np.isfinite(cap.render(cam)))
        if n_px >= 200:
            return cap


RANDOM_OBJECTS = {
    "quadratic": random_quadratic_patch,
    "plane": random_plane_patch,
    "sphere": random_spherical_cap,
}


def random_instance_scene(kind: str, rng: np.random.Generator, cam: PinholeCamera = DEFAULT_CAMERA) -> SyntheticScene:
    try:
        make = RANDOM_OBJECTS[kind]
    except KeyError:
        raise ValueError(f"unknown instance kind {kind!r}; expected one of {sorted(RANDOM_OBJECTS)}") from None
    return generate_scene([make(rng, cam)], cam)
