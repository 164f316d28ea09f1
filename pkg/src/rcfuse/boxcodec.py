"""Anchors, box offset encoding and detection losses.

Boxes are 7-vectors ``[x, y, z, w, l, h, theta]`` (centre, width, length,
height in metres, yaw in radians). The yaw offset is encoded as the sine of
the yaw difference, so decoding is only exact for ``|dtheta| <= pi/2``;
larger gaps come back as the principal value ``asin(sin(.))``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NoPositives, NonPositiveDimension
from .pillars import BevGridSpec

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise NonPositiveDimension(f"box dimensions must be positive, got w={self.w} l={self.l} h={self.h}")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(x) for x in np.asarray(a).reshape(7)))


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dz: float
    dw: float
    dl: float
    dh: float
    dtheta: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dw, self.dl, self.dh, self.dtheta])

    @classmethod
    def from_array(cls, a) -> "BoxDelta":
        return cls(*(float(x) for x in np.asarray(a).reshape(7)))


@dataclass(frozen=True)
class AnchorConfig:
    """Per-class anchor sizes ``(l, w, h)`` in metres plus the anchor centre height."""

    sizes: dict
    z_center: dict = field(default_factory=dict)
    rotations: tuple[float, ...] = (0.0, np.pi / 2)

    def __post_init__(self):
        for name, dims in self.sizes.items():
            if len(dims) != 3 or min(dims) <= 0:
                raise NonPositiveDimension(f"anchor {name!r} needs three positive dimensions")


TJ4D_ANCHORS = AnchorConfig({
    "Car": (4.56, 1.84, 1.7),
    "Pedestrian": (0.8, 0.6, 1.69),
    "Cyclist": (1.77, 0.78, 1.6),
    "Truck": (10.76, 2.66, 3.47),
})
VOD_ANCHORS = AnchorConfig({
    "Car": (3.9, 1.6, 1.56),
    "Pedestrian": (0.8, 0.6, 1.73),
    "Cyclist": (1.76, 0.6, 1.73),
})


def generate_anchors(grid: BevGridSpec, config: AnchorConfig, stride: int = 1) -> dict:
    """Anchor boxes at BEV cell centres for every class and rotation.

    Returns ``{class: array (H', W', n_rot, 7)}`` where ``H' = ceil(H / stride)``.
    """
    rows = np.arange(0, grid.H, stride)
    cols = np.arange(0, grid.W, stride)
    cx, cy = grid.cell_center(rows[:, None], cols[None, :])
    cx, cy = np.broadcast_arrays(cx, cy)
    rots = np.asarray(config.rotations, dtype=np.float64)
    out = {}
    for name, (l, w, h) in config.sizes.items():
        z = config.z_center.get(name, 0.0)
        a = np.empty(cx.shape + (len(rots), 7))
        a[..., 0] = cx[..., None]
        a[..., 1] = cy[..., None]
        a[..., 2] = z
        a[..., 3] = w
        a[..., 4] = l
        a[..., 5] = h
        a[..., 6] = rots
        out[name] = a
    return out


def encode(gt, anchors) -> np.ndarray:
    """Vectorised offsets for ``(..., 7)`` box arrays."""
    gt = np.asarray(gt, dtype=np.float64)
    an = np.asarray(anchors, dtype=np.float64)
    if np.any(an[..., 3:6] <= 0) or np.any(gt[..., 3:6] <= 0):
        raise NonPositiveDimension("box dimensions must be positive")
    diag = np.sqrt(an[..., 3] ** 2 + an[..., 4] ** 2)
    return np.stack([
        (gt[..., 0] - an[..., 0]) / diag,
        (gt[..., 1] - an[..., 1]) / diag,
        (gt[..., 2] - an[..., 2]) / an[..., 5],
        np.log(gt[..., 3] / an[..., 3]),
        np.log(gt[..., 4] / an[..., 4]),
        np.log(gt[..., 5] / an[..., 5]),
        np.sin(gt[..., 6] - an[..., 6]),
    ], axis=-1)


def decode(deltas, anchors, return_clamped: bool = False):
    """Inverse of :func:`encode`. ``|dtheta| > 1`` is clamped to +-1 and flagged."""
    dl = np.asarray(deltas, dtype=np.float64)
    an = np.asarray(anchors, dtype=np.float64)
    if np.any(an[..., 3:6] <= 0):
        raise NonPositiveDimension("anchor dimensions must be positive")
    clamped = np.abs(dl[..., 6]) > 1
    if np.any(clamped):
        logger.warning("clamped %d yaw offsets outside [-1, 1]", int(np.count_nonzero(clamped)))
    diag = np.sqrt(an[..., 3] ** 2 + an[..., 4] ** 2)
    boxes = np.stack([
        dl[..., 0] * diag + an[..., 0],
        dl[..., 1] * diag + an[..., 1],
        dl[..., 2] * an[..., 5] + an[..., 2],
        np.exp(dl[..., 3]) * an[..., 3],
        np.exp(dl[..., 4]) * an[..., 4],
        np.exp(dl[..., 5]) * an[..., 5],
        an[..., 6] + np.arcsin(np.clip(dl[..., 6], -1.0, 1.0)),
    ], axis=-1)
    return (boxes, clamped) if return_clamped else boxes


def encode_box(gt: Box3D, anchor: Box3D) -> BoxDelta:
    return BoxDelta.from_array(encode(gt.to_array(), anchor.to_array()))


def decode_box(d: BoxDelta, anchor: Box3D) -> Box3D:
    return Box3D.from_array(decode(d.to_array(), anchor.to_array()))


def smooth_l1(x, beta: float = 1.0) -> np.ndarray:
    ax = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def localization_loss(residuals) -> float:
    """Mean over positives of the summed SmoothL1 of the 7 offset residuals."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    if len(r) == 0:
        raise NoPositives("localization loss needs at least one positive sample")
    return float(smooth_l1(r).sum() / len(r))


def classification_loss(p, targets, alpha=0.25, gamma: float = 2.0) -> float:
    """Focal classification loss normalised by the number of positives.

    ``p`` is ``(N_pos, N_cls)`` per-class probabilities and ``targets`` is
    either class indices ``(N_pos,)`` or a 0/1 array shaped like ``p``. The
    probability of the correct outcome is ``p`` on target entries and
    ``1 - p`` elsewhere. A scalar ``alpha`` weights targets by ``alpha`` and
    the rest by ``1 - alpha``; an array ``alpha`` is used as the per-entry
    weights directly. Probabilities below 1e-12 are clamped (and logged).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    n_pos = p.shape[0]
    if n_pos == 0:
        raise NoPositives("classification loss needs at least one positive sample")
    t = np.asarray(targets)
    if t.shape != p.shape:
        onehot = np.zeros(p.shape, dtype=bool)
        onehot[np.arange(n_pos), t.reshape(-1).astype(np.int64)] = True
        t = onehot
    t = t.astype(bool)
    pt = np.where(t, p, 1.0 - p)
    if np.any(pt < PROB_FLOOR):
        logger.warning("clamped %d probabilities to %g", int(np.count_nonzero(pt < PROB_FLOOR)), PROB_FLOOR)
        pt = np.maximum(pt, PROB_FLOOR)
    a = np.where(t, alpha, 1.0 - alpha) if np.ndim(alpha) == 0 else np.broadcast_to(alpha, p.shape)
    return float(-(a * (1.0 - pt) ** gamma * np.log(pt)).sum() / n_pos)


def direction_targets(theta, offset: float = 0.0) -> np.ndarray:
    """Heading-sign bin (0 front, 1 back) of each yaw."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) - offset, 2 * np.pi)
    return (wrapped >= np.pi).astype(np.int64)


def direction_loss(p_back, theta_gt, offset: float = 0.0) -> float:
    """Binary cross-entropy between predicted back-bin probabilities and the true heading bin."""
    p = np.clip(np.asarray(p_back, dtype=np.float64).reshape(-1), PROB_FLOOR, 1.0 - PROB_FLOOR)
    if len(p) == 0:
        raise NoPositives("direction loss needs at least one positive sample")
    t = direction_targets(theta_gt, offset).reshape(-1)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 2.0
    beta2: float = 1.0
    beta3: float = 0.2
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise ValueError("loss weights must be >= 0")


def total_loss(l_loc: float, l_cls: float, l_dir: float, w: LossWeights = LossWeights()) -> float:
    # zero-weighted terms are skipped outright so a NaN placeholder cannot leak in
    terms = [(w.beta1, l_loc), (w.beta2, l_cls), (w.beta3, l_dir)]
    return float(sum(b * l for b, l in terms if b != 0))
