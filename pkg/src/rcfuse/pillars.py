"""Pillar encoding of radar and pseudo-point clouds into BEV pseudo-images.

Pipeline: ``augment_radar_points`` (or ``densify.augment_points`` for
pseudo-points) -> ``pillarize`` -> ``apply_channel_map`` -> ``scatter_max``.
The learned per-point linear/BN/ReLU block is replaced by a pluggable
affine :class:`ChannelMap` (identity by default).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, DuplicatePillarCoord, InvariantViolation

# feature column layout (x, y, z always first)
TJ4D_FEATURES = ("x", "y", "z", "s", "v", "r", "mu", "tau", "x_c", "y_c", "z_c", "x_p", "y_p")
VOD_FEATURES = ("x", "y", "z", "s", "v", "v_comp", "x_c", "y_c", "z_c", "x_p", "y_p")
PSEUDO_FEATURES = ("x", "y", "z", "x_c", "y_c", "z_c", "x_p", "y_p")


@dataclass(frozen=True)
class RadarSchema:
    name: str
    schema_id: int
    raw_fields: tuple[str, ...]
    augmented_fields: tuple[str, ...]

    @property
    def n_raw(self) -> int:
        return len(self.raw_fields)

    @property
    def n_augmented(self) -> int:
        return len(self.augmented_fields)


TJ4D = RadarSchema("tj4d", 1, ("x", "y", "z", "s", "v"), TJ4D_FEATURES)
VOD = RadarSchema("vod", 2, ("x", "y", "z", "s", "v", "v_comp"), VOD_FEATURES)
XYZ = RadarSchema("xyz", 3, ("x", "y", "z"), PSEUDO_FEATURES)
SCHEMAS = {s.name: s for s in (TJ4D, VOD, XYZ)}
SCHEMAS_BY_ID = {s.schema_id: s for s in (TJ4D, VOD, XYZ)}


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    cell_size: tuple[float, float] = (0.16, 0.16)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range", "cell_size"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ValueError("grid ranges must be non-degenerate")
        if not (self.cell_size[0] > 0 and self.cell_size[1] > 0):
            raise ValueError("cell size must be positive")
        if self.W < 1 or self.H < 1:
            raise ValueError("grid has no cells")

    @classmethod
    def from_shape(cls, x_range, y_range, z_range, width: int, height: int) -> "BevGridSpec":
        dx = (x_range[1] - x_range[0]) / width
        dy = (y_range[1] - y_range[0]) / height
        return cls(x_range, y_range, z_range, (dx, dy))

    @property
    def W(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size[0]))

    @property
    def H(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size[1]))

    @property
    def ranges(self) -> tuple[float, ...]:
        return self.x_range + self.y_range + self.z_range

    def in_range(self, xyz) -> np.ndarray:
        p = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        (x0, x1), (y0, y1), (z0, z1) = self.x_range, self.y_range, self.z_range
        return (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z < z1)

    def cell_index(self, x, y):
        """Unclipped ``(row, col)``; callers gate with :meth:`in_range` first."""
        col = np.floor((np.asarray(x, dtype=np.float64) - self.x_range[0]) / self.cell_size[0]).astype(np.int64)
        row = np.floor((np.asarray(y, dtype=np.float64) - self.y_range[0]) / self.cell_size[1]).astype(np.int64)
        return row, col

    def cell_index_clipped(self, x, y):
        # an in-range coordinate can still round onto the upper edge
        row, col = self.cell_index(x, y)
        return np.clip(row, 0, self.H - 1), np.clip(col, 0, self.W - 1)

    def cell_center(self, row, col):
        cx = self.x_range[0] + (np.asarray(col) + 0.5) * self.cell_size[0]
        cy = self.y_range[0] + (np.asarray(row) + 0.5) * self.cell_size[1]
        return cx, cy


TJ4D_GRID = BevGridSpec((0.0, 69.12), (-39.68, 39.68), (-4.0, 2.0), (0.16, 0.16))
VOD_GRID = BevGridSpec((0.0, 51.2), (-25.6, 25.6), (-3.0, 2.0), (0.16, 0.16))
GRIDS = {"tj4d": TJ4D_GRID, "vod": VOD_GRID}


def pillar_offsets(xyz, grid: BevGridSpec, row=None, col=None) -> np.ndarray:
    """Per-point ``[x_c, y_c, z_c, x_p, y_p]``.

    ``x_c`` etc. are offsets from the mean of the points sharing the point's
    pillar; ``x_p``, ``y_p`` are offsets from the pillar's geometric centre.
    Points are grouped by their (possibly out-of-grid) floor cell.
    """
    p = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return np.zeros((0, 5))
    if row is None:
        row, col = grid.cell_index(p[:, 0], p[:, 1])
    r0, c0 = row.min(), col.min()
    key = (row - r0) * (int(col.max() - c0) + 1) + (col - c0)
    _, inv, cnt = np.unique(key, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    out = np.empty((len(p), 5))
    for k in range(3):
        mean = np.bincount(inv, weights=p[:, k]) / cnt
        out[:, k] = p[:, k] - mean[inv]
    cx, cy = grid.cell_center(row, col)
    out[:, 3] = p[:, 0] - cx
    out[:, 4] = p[:, 1] - cy
    return out


def augment_radar_points(points, schema: RadarSchema, grid: BevGridSpec, return_index: bool = False):
    """Drop out-of-range points and append the derived per-point attributes.

    ``points`` is ``(N, schema.n_raw)``. TJ4D gains range ``r``, azimuth
    ``mu = atan2(y, x)`` and elevation ``tau = asin(z / r)``; VoD keeps its
    compensated velocity. Both end with the pillar offsets.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, schema.n_raw)
    keep = np.flatnonzero(grid.in_range(pts[:, :3]))
    pts = pts[keep]
    row, col = grid.cell_index_clipped(pts[:, 0], pts[:, 1])
    offsets = pillar_offsets(pts[:, :3], grid, row, col)
    if schema is TJ4D or schema.name == "tj4d":
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        r = np.sqrt(x * x + y * y + z * z)
        mu = np.arctan2(y, x)
        with np.errstate(invalid="ignore", divide="ignore"):
            tau = np.where(r > 0, np.arcsin(np.clip(z / np.where(r > 0, r, 1.0), -1.0, 1.0)), 0.0)
        out = np.column_stack([pts[:, :5], r, mu, tau, offsets])
    else:
        out = np.column_stack([pts, offsets])
    return (out, keep) if return_index else out


@dataclass(frozen=True, eq=False)
class PillarTensor:
    """Dense pillar features.

    ``features`` is ``(D, P, N_r)`` float32, ``counts`` the number of real
    point slots per pillar and ``coords`` the ``(row, col)`` of each pillar.
    """

    features: np.ndarray
    counts: np.ndarray
    coords: np.ndarray

    @property
    def n_features(self) -> int:
        return self.features.shape[0]

    @property
    def n_pillars(self) -> int:
        return self.features.shape[1]

    @property
    def n_per_pillar(self) -> int:
        return self.features.shape[2]

    def slot_mask(self) -> np.ndarray:
        return np.arange(self.n_per_pillar)[None, :] < self.counts[:, None]


def fisher_yates_select(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Partial Fisher-Yates draw of ``k`` distinct indices from ``range(n)``, returned ascending."""
    idx = np.arange(n)
    draws = rng.integers(np.arange(k), n)
    for i, j in enumerate(draws):
        idx[i], idx[j] = idx[j], idx[i]
    return np.sort(idx[:k])


_BLOCK = 4096


def pillarize(points, grid: BevGridSpec, n_per_pillar: int = 32, seed: int = 0, threads: int = 1) -> PillarTensor:
    """Group augmented points into pillars, sampling or zero-padding to ``n_per_pillar``.

    Pillars are ordered by linear cell index ``row * W + col``; points keep
    their input order inside a pillar. Overflowing pillars are subsampled
    with a Fisher-Yates draw seeded by ``(seed, cell index)``, so the result
    does not depend on ``threads``.
    """
    if n_per_pillar < 1:
        raise ValueError("n_per_pillar must be >= 1")
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise DimensionMismatch("points must be (N, D) with D >= 3")
    d_feat = pts.shape[1]
    keep = grid.in_range(pts[:, :3])
    pts = pts[keep]
    if len(pts) == 0:
        return PillarTensor(np.zeros((d_feat, 0, n_per_pillar), np.float32),
                            np.zeros(0, np.int32), np.zeros((0, 2), np.int32))

    row, col = grid.cell_index_clipped(pts[:, 0], pts[:, 1])
    lin = row * grid.W + col
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    starts = np.flatnonzero(np.r_[True, lin_sorted[1:] != lin_sorted[:-1]])
    sizes = np.diff(np.r_[starts, len(lin_sorted)])
    cells = lin_sorted[starts]
    n_pillars = len(starts)

    pillar_of = np.repeat(np.arange(n_pillars), sizes)
    slot = np.arange(len(order)) - np.repeat(starts, sizes)
    selected = slot < n_per_pillar

    features = np.zeros((d_feat, n_pillars, n_per_pillar), np.float32)
    pts32 = pts.astype(np.float32)

    def fill(block: int) -> None:
        lo, hi = block * _BLOCK, min((block + 1) * _BLOCK, n_pillars)
        a, b = starts[lo], (starts[hi] if hi < n_pillars else len(order))
        sel = selected[a:b].copy()
        slt = slot[a:b].copy()
        for p in np.flatnonzero(sizes[lo:hi] > n_per_pillar) + lo:
            rng = np.random.default_rng([int(seed), int(cells[p])])
            s0 = starts[p] - a
            chosen = fisher_yates_select(int(sizes[p]), n_per_pillar, rng)
            sel[s0:s0 + sizes[p]] = False
            sel[s0 + chosen] = True
            slt[s0 + chosen] = np.arange(n_per_pillar)
        src = order[a:b][sel]
        features[:, pillar_of[a:b][sel], slt[sel]] = pts32[src].T

    blocks = range((n_pillars + _BLOCK - 1) // _BLOCK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, blocks))
    else:
        for blk in blocks:
            fill(blk)

    counts = np.minimum(sizes, n_per_pillar).astype(np.int32)
    coords = np.stack([cells // grid.W, cells % grid.W], axis=1).astype(np.int32)
    return PillarTensor(features, counts, coords)


@dataclass(frozen=True, eq=False)
class ChannelMap:
    """Affine per-point channel transform ``y = W x + b``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float32)
        if w.ndim != 2:
            raise DimensionMismatch("channel map weight must be 2-D")
        b = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        if b.shape[0] != w.shape[0]:
            raise DimensionMismatch("bias length must equal output width")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def identity(cls, d: int) -> "ChannelMap":
        return cls(np.eye(d, dtype=np.float32), np.zeros(d, np.float32))

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]


def apply_channel_map(t: PillarTensor, cmap: ChannelMap | None = None) -> PillarTensor:
    if cmap is None:
        return t
    if cmap.n_in != t.n_features:
        raise DimensionMismatch(f"channel map expects {cmap.n_in} inputs, tensor has {t.n_features}")
    out = np.tensordot(cmap.weight, t.features, axes=(1, 0)) + cmap.bias[:, None, None]
    out *= t.slot_mask()[None]
    return PillarTensor(out.astype(np.float32, copy=False), t.counts, t.coords)


@dataclass(frozen=True, eq=False)
class BevTensor:
    data: np.ndarray
    grid: BevGridSpec

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1:] != (self.grid.H, self.grid.W):
            raise DimensionMismatch(f"BEV data {self.data.shape} does not match grid (C, {self.grid.H}, {self.grid.W})")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def scatter_max(t: PillarTensor, grid: BevGridSpec) -> BevTensor:
    """Max-pool each pillar over its real slots and write it to its BEV cell."""
    c = t.n_features
    bev = np.zeros((c, grid.H, grid.W), dtype=np.float32)
    if t.n_pillars == 0:
        return BevTensor(bev, grid)
    rows, cols = t.coords[:, 0].astype(np.int64), t.coords[:, 1].astype(np.int64)
    if rows.min() < 0 or rows.max() >= grid.H or cols.min() < 0 or cols.max() >= grid.W:
        raise InvariantViolation("pillar coordinates outside the grid")
    if np.any(t.counts < 1):
        raise InvariantViolation("retained pillar with no points")
    lin = rows * grid.W + cols
    if len(np.unique(lin)) != len(lin):
        raise DuplicatePillarCoord("two pillars share one BEV cell")
    pooled = np.max(t.features, axis=2, where=t.slot_mask()[None], initial=-np.inf)
    bev[:, rows, cols] = pooled
    return BevTensor(bev, grid)


def concat_bev(*tensors: BevTensor) -> BevTensor:
    """Channel concatenation of BEV tensors sharing one grid."""
    if not tensors:
        raise ValueError("nothing to concatenate")
    grid = tensors[0].grid
    for t in tensors[1:]:
        if t.data.shape[1:] != tensors[0].data.shape[1:]:
            raise DimensionMismatch("BEV tensors have different spatial shapes")
    data = np.concatenate([np.asarray(t.data, dtype=np.float64) for t in tensors], axis=0)
    dtype = np.result_type(*[t.data.dtype for t in tensors])
    return BevTensor(data.astype(dtype), grid)
