"""Per-instance depth surfaces fitted from sparse reference points.

A surface maps pixel coordinates to depth::

    d(u, v) = a*u'^2 + b*v'^2 + c*u'*v' + d*u' + e*v' + f,
    u' = (u - u0) / s,  v' = (v - v0) / s

The coefficients are found by exact minimisation of the per-instance
surface-fitting loss (mean squared reference residual plus a weighted
penalty on the gap between the reference mean depth and the mean
predicted depth over the whole mask), with a small Tikhonov term. The loss
is linear least squares in the coefficients and is solved through its
normal equations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyMask, EmptyReferenceSet
from .geometry import InstanceMask, ReferencePointSet

SHAPES = ("constant", "plane", "quadratic")

# indices into [u'^2, v'^2, u'v', u', v', 1]
_ACTIVE = {
    "constant": np.array([5]),
    "plane": np.array([3, 4, 5]),
    "quadratic": np.arange(6),
}


@dataclass(frozen=True)
class BBox2D:
    u1: int
    v1: int
    u2: int
    v2: int

    @property
    def width(self) -> int:
        return self.u2 - self.u1

    @property
    def height(self) -> int:
        return self.v2 - self.v1

    @property
    def center(self) -> tuple[float, float]:
        return (self.u1 + self.u2) / 2.0, (self.v1 + self.v2) / 2.0


@dataclass(frozen=True)
class FitConfig:
    shape: str = "quadratic"
    lam: float = 1.0
    ridge: float = 1e-12
    min_points: dict = field(default_factory=lambda: {"constant": 1, "plane": 3, "quadratic": 6})
    cond_max: float = 1e8

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown surface shape {self.shape!r}; expected one of {SHAPES}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not self.ridge >= 0:
            raise ValueError("ridge must be >= 0")
        if not self.cond_max > 1:
            raise ValueError("cond_max must be > 1")


@dataclass(frozen=True, eq=False)
class SurfaceCoefficients:
    rho: np.ndarray
    shape_used: str = "quadratic"
    condition_estimate: float = 1.0
    normalization: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        rho = np.array(self.rho, dtype=np.float64).reshape(6)
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "normalization", tuple(float(x) for x in self.normalization))
        if self.shape_used not in SHAPES:
            raise ValueError(f"unknown surface shape {self.shape_used!r}")
        if self.normalization[2] <= 0:
            raise ValueError("normalization scale must be positive")

    def evaluate(self, u, v):
        return evaluate_surface(self, u, v)

    def to_dict(self) -> dict:
        return {
            "rho": [float(x) for x in self.rho],
            "shape_used": self.shape_used,
            "condition_estimate": float(self.condition_estimate),
            "normalization": list(self.normalization),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurfaceCoefficients":
        return cls(d["rho"], d["shape_used"], d.get("condition_estimate", 1.0), tuple(d["normalization"]))


def extract_bbox(mask: InstanceMask) -> BBox2D:
    if len(mask) == 0:
        raise EmptyMask(f"instance {mask.instance_id} has no pixels")
    u, v = mask.u, mask.v
    return BBox2D(int(u.min()), int(v.min()), int(u.max()), int(v.max()))


def default_normalization(bbox: BBox2D) -> tuple[float, float, float]:
    u0, v0 = bbox.center
    return u0, v0, float(max(bbox.width, bbox.height, 1))


def surface_features(u, v, normalization=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Design matrix rows ``[u'^2, v'^2, u'v', u', v', 1]``, shape ``(..., 6)``."""
    u0, v0, s = normalization
    un = (np.asarray(u, dtype=np.float64) - u0) / s
    vn = (np.asarray(v, dtype=np.float64) - v0) / s
    un, vn = np.broadcast_arrays(un, vn)
    return np.stack([un * un, vn * vn, un * vn, un, vn, np.ones_like(un)], axis=-1)


def evaluate_surface(rho: SurfaceCoefficients, u, v):
    a, b, c, d, e, f = rho.rho
    u0, v0, s = rho.normalization
    un = (np.asarray(u, dtype=np.float64) - u0) / s
    vn = (np.asarray(v, dtype=np.float64) - v0) / s
    out = a * un * un + b * vn * vn + c * un * vn + d * un + e * vn + f
    return float(out) if np.ndim(out) == 0 else out


def predict_mask_depth(rho: SurfaceCoefficients, mask: InstanceMask) -> np.ndarray:
    """Fitted depth at every mask pixel, in ``mask.pixels`` order."""
    return evaluate_surface(rho, mask.u, mask.v)


def _fallback_chain(shape: str) -> list[str]:
    return list(SHAPES[: SHAPES.index(shape) + 1])[::-1]


def fit_surface(refs: ReferencePointSet, mask: InstanceMask, cfg: FitConfig = FitConfig(),
                normalization: tuple[float, float, float] | None = None) -> SurfaceCoefficients:
    """Fit one instance's surface by exact minimisation of its loss term.

    Falls back quadratic -> plane -> constant when there are too few
    references for the requested shape or the reference part of the normal
    matrix is worse conditioned than ``cfg.cond_max``. ``normalization`` overrides the
    default bbox-centred ``(u0, v0, s)``.
    """
    n = len(refs)
    if n == 0:
        raise EmptyReferenceSet(f"instance {mask.instance_id} has no reference points")
    norm = normalization if normalization is not None else default_normalization(extract_bbox(mask))
    if len(mask) == 0:
        raise EmptyMask(f"instance {mask.instance_id} has no pixels")

    phi = surface_features(refs.u, refs.v, norm)
    phi_bar = surface_features(mask.u, mask.v, norm).mean(axis=0)
    d = refs.d
    d_bar = d.mean()

    for shape in _fallback_chain(cfg.shape):
        if n < cfg.min_points[shape]:
            continue
        cols = _ACTIVE[shape]
        a = phi[:, cols]
        m = phi_bar[cols]
        data_gram = a.T @ a / n + cfg.ridge * np.eye(len(cols))
        # conditioning is judged on the reference term alone: the lambda term is
        # rank one and would otherwise push large-lambda fits down the chain
        cond = float(np.linalg.cond(data_gram))
        gram = data_gram + cfg.lam * np.outer(m, m)
        rhs = a.T @ d / n + cfg.lam * m * d_bar
        if (not np.isfinite(cond) or cond > cfg.cond_max) and shape != "constant":
            continue
        rho = np.zeros(6)
        rho[cols] = np.linalg.solve(gram, rhs)
        return SurfaceCoefficients(rho, shape, cond, norm)
    raise AssertionError("constant fit is always reachable")  # pragma: no cover


def instance_loss(refs: ReferencePointSet, mask: InstanceMask, rho: SurfaceCoefficients, lam: float) -> float:
    if len(refs) == 0:
        raise EmptyReferenceSet(f"instance {mask.instance_id} has no reference points")
    resid = refs.d - evaluate_surface(rho, refs.u, refs.v)
    gap = refs.d.mean() - predict_mask_depth(rho, mask).mean()
    return float(np.mean(resid * resid) + lam * gap * gap)


def surface_fit_loss(instances: Iterable[tuple[ReferencePointSet, InstanceMask, SurfaceCoefficients]],
                     lam: float) -> float:
    """Frame loss: plain sum of the per-instance terms (no normalisation by instance count)."""
    return float(sum(instance_loss(r, m, c, lam) for r, m, c in instances))


def build_depth_enhanced_mask(instances: Sequence[tuple[InstanceMask, ReferencePointSet]],
                              image_size: tuple[int, int]) -> np.ndarray:
    """Depth image where each instance's pixels hold its mean reference depth.

    Returns an ``(height, width)`` float64 array; background and instances
    without references stay 0. A contested pixel goes to the instance with
    more references, ties to the lower instance id.
    """
    w, h = image_size
    out = np.zeros((h, w), dtype=np.float64)
    claimed = np.zeros((h, w), dtype=bool)
    order = sorted(instances, key=lambda mr: (-len(mr[1]), mr[0].instance_id))
    for mask, refs in order:
        u, v = mask.u, mask.v
        free = ~claimed[v, u]
        u, v = u[free], v[free]
        claimed[v, u] = True
        if len(refs):
            out[v, u] = refs.d.mean()
    return out
