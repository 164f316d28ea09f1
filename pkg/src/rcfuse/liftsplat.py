"""Lift-splat view transformation with a deterministic depth distribution.

``build_depth_distribution`` turns a fitted per-pixel depth map into a
categorical distribution over depth bins (one-hot, Gaussian or uniform);
``lift`` forms the outer product with a PV feature map; ``splat`` drops
every frustum cell into its BEV cell with sum pooling.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DepthOutOfRange, DimensionMismatch
from .geometry import PinholeCamera, RigidTransform
from .pillars import BevGridSpec, BevTensor

MODES = ("one-hot", "gaussian", "uniform")


@dataclass(frozen=True)
class DepthBinSpec:
    d_min: float = 1.0
    d_max: float = 70.0
    n_bins: int = 138

    def __post_init__(self):
        if not (self.d_max > self.d_min > 0):
            raise ValueError("depth bins need d_max > d_min > 0")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")

    @property
    def width(self) -> float:
        return (self.d_max - self.d_min) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.n_bins) + 0.5) * self.width

    def nearest_bin(self, d) -> np.ndarray:
        k = np.floor((np.asarray(d, dtype=np.float64) - self.d_min) / self.width)
        return np.clip(k, 0, self.n_bins - 1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class DepthDistribution:
    """``probs`` is ``(D_b, H, W)``; ``n_demoted`` counts out-of-range foreground pixels."""

    probs: np.ndarray
    n_demoted: int = 0


def build_depth_distribution(depth_map, bins: DepthBinSpec, mode: str = "one-hot",
                             sigma: float | None = None, strict: bool = False) -> DepthDistribution:
    """Per-pixel depth distribution from a fitted depth map (0 marks background).

    Foreground pixels outside ``[d_min, d_max]`` are treated as background
    and counted in ``n_demoted``; with ``strict=True`` they raise
    :class:`DepthOutOfRange` instead.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "gaussian" and not (sigma is not None and sigma > 0):
        raise ValueError("gaussian mode needs sigma > 0")
    depth = np.asarray(depth_map, dtype=np.float64)
    if depth.ndim != 2:
        raise DimensionMismatch("depth map must be 2-D")
    h, w = depth.shape
    nb = bins.n_bins
    probs = np.full((nb, h, w), 1.0 / nb)
    if mode == "uniform":
        return DepthDistribution(probs, 0)

    fg = depth != 0
    inside = fg & (depth >= bins.d_min) & (depth <= bins.d_max)
    n_out = int(np.count_nonzero(fg & ~inside))
    if strict and n_out:
        raise DepthOutOfRange(f"{n_out} foreground pixels lie outside [{bins.d_min}, {bins.d_max}] m")
    vv, uu = np.nonzero(inside)
    if len(vv):
        d = depth[vv, uu]
        probs[:, vv, uu] = 0.0
        if mode == "one-hot":
            probs[bins.nearest_bin(d), vv, uu] = 1.0
        else:
            z = (bins.centers[:, None] - d[None, :]) / sigma
            g = np.exp(-0.5 * z * z)
            tot = g.sum(axis=0)
            # far-off-bin depths underflow; fall back to the nearest bin
            dead = tot == 0
            g[:, dead] = 0.0
            g[bins.nearest_bin(d[dead]), np.flatnonzero(dead)] = 1.0
            tot[dead] = 1.0
            probs[:, vv, uu] = g / tot
    return DepthDistribution(probs, n_out)


def lift(f, p) -> np.ndarray:
    """Outer product ``F_u[c, d, h, w] = f[c, h, w] * p[d, h, w]``."""
    f = np.asarray(f, dtype=np.float64)
    p = np.asarray(p.probs if isinstance(p, DepthDistribution) else p, dtype=np.float64)
    if f.ndim != 3 or p.ndim != 3 or f.shape[1:] != p.shape[1:]:
        raise DimensionMismatch(f"feature map {f.shape} and distribution {p.shape} disagree spatially")
    return f[:, None, :, :] * p[None, :, :, :]


def frustum_cells(shape_dhw, cam: PinholeCamera, t_cam_to_ego: RigidTransform,
                  bins: DepthBinSpec, grid: BevGridSpec) -> np.ndarray:
    """Linear BEV index (``row * W + col``) of every frustum cell, -1 when out of range.

    Cells are sampled at the pixel centre ``(w + 0.5, h + 0.5)`` and the bin
    centre depth. Flattened in ``(d, h, w)`` C order.
    """
    nd, h, w = shape_dhw
    if nd != bins.n_bins:
        raise DimensionMismatch(f"frustum has {nd} depth slices, bin spec has {bins.n_bins}")
    dd, hh, ww = np.meshgrid(bins.centers, np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pts = t_cam_to_ego.apply(cam.unproject(ww.ravel(), hh.ravel(), dd.ravel()))
    ok = grid.in_range(pts)
    row, col = grid.cell_index_clipped(pts[:, 0], pts[:, 1])
    return np.where(ok, row * grid.W + col, -1)


_CHUNK = 1 << 16


def splat(fr, cam: PinholeCamera, t_cam_to_ego: RigidTransform, bins: DepthBinSpec,
          grid: BevGridSpec, threads: int = 1) -> BevTensor:
    """Sum-pool a ``(C, D_b, H, W)`` frustum into a ``(C, H_bev, W_bev)`` BEV tensor.

    Frustum cells are accumulated in fixed-size chunks of flat index order
    and the partial grids are merged in chunk order, so the floating-point
    result is identical for every ``threads`` value.
    """
    fr = np.asarray(fr, dtype=np.float64)
    if fr.ndim != 4:
        raise DimensionMismatch("frustum must be (C, D, H, W)")
    c = fr.shape[0]
    idx = frustum_cells(fr.shape[1:], cam, t_cam_to_ego, bins, grid)
    flat = fr.reshape(c, -1)
    n_cells = grid.H * grid.W
    n = idx.shape[0]
    chunks = [(a, min(a + _CHUNK, n)) for a in range(0, n, _CHUNK)]

    def partial(bounds):
        a, b = bounds
        sel = idx[a:b]
        ok = sel >= 0
        cells = sel[ok]
        return np.stack([np.bincount(cells, weights=flat[ch, a:b][ok], minlength=n_cells) for ch in range(c)])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(partial, chunks))
    else:
        parts = [partial(ch) for ch in chunks]
    out = np.zeros((c, n_cells))
    for part in parts:
        out += part
    return BevTensor(out.reshape(c, grid.H, grid.W), grid)
