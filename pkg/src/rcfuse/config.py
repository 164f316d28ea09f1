"""Pipeline configuration: INI sections named after the library modules.

Example::

    [pipeline]
    dataset = tj4d        ; tj4d | vod, selects grid, schema and anchors
    seed = 0
    threads = 1

    [surface_fit]
    shape = quadratic
    lambda = 1.0
    ridge = 1e-12
    cond_max = 1e8

    [densify]
    stride = 1

    [pillars]
    n_per_pillar = 32
    ; optional grid override, metres
    x_range = 0, 69.12
    y_range = -39.68, 39.68
    z_range = -4, 2
    cell_size = 0.16, 0.16

    [liftsplat]
    d_min = 1.0
    d_max = 70.0
    n_bins = 138
    mode = one-hot
    sigma = 0.5
    downsample = 8

    [boxcodec]
    beta1 = 2.0
    beta2 = 1.0
    beta3 = 0.2
    alpha = 0.25
    gamma = 2.0

Command-line flags override file values.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace

from .boxcodec import LossWeights
from .errors import InvalidSpec
from .liftsplat import MODES, DepthBinSpec
from .pillars import GRIDS, SCHEMAS, BevGridSpec, RadarSchema
from .surface_fit import FitConfig


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = "tj4d"
    grid: BevGridSpec = field(default_factory=lambda: GRIDS["tj4d"])
    fit: FitConfig = field(default_factory=FitConfig)
    stride: int = 1
    n_per_pillar: int = 32
    bins: DepthBinSpec = field(default_factory=DepthBinSpec)
    lift_mode: str = "one-hot"
    lift_sigma: float = 0.5
    downsample: int = 8
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    threads: int = 1

    @property
    def schema(self) -> RadarSchema:
        return SCHEMAS[self.dataset]

    @property
    def depth_range(self) -> tuple[float, float]:
        return self.grid.x_range


_KEYS = {
    "pipeline": {"dataset", "seed", "threads"},
    "surface_fit": {"shape", "lambda", "ridge", "cond_max"},
    "densify": {"stride"},
    "pillars": {"n_per_pillar", "x_range", "y_range", "z_range", "cell_size"},
    "liftsplat": {"d_min", "d_max", "n_bins", "mode", "sigma", "downsample"},
    "boxcodec": {"beta1", "beta2", "beta3", "alpha", "gamma"},
}


def _float(sec, key):
    try:
        return float(sec[key])
    except ValueError:
        raise InvalidSpec(f"{sec.name}.{key}", f"expected a number, got {sec[key]!r}") from None


def _int(sec, key, lo=None):
    try:
        val = int(sec[key])
    except ValueError:
        raise InvalidSpec(f"{sec.name}.{key}", f"expected an integer, got {sec[key]!r}") from None
    if lo is not None and val < lo:
        raise InvalidSpec(f"{sec.name}.{key}", f"must be >= {lo}")
    return val


def _pair(sec, key):
    parts = [p for p in sec[key].replace(",", " ").split() if p]
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise InvalidSpec(f"{sec.name}.{key}", f"expected two numbers, got {sec[key]!r}") from None
    if len(vals) != 2:
        raise InvalidSpec(f"{sec.name}.{key}", "expected two numbers")
    return vals


def for_dataset(name: str) -> PipelineConfig:
    if name not in GRIDS:
        raise InvalidSpec("pipeline.dataset", f"unknown dataset {name!r}; expected one of {sorted(GRIDS)}")
    return PipelineConfig(dataset=name, grid=GRIDS[name])


def load_config(path=None, dataset: str | None = None) -> PipelineConfig:
    """Read an INI config; ``dataset`` (from the command line) overrides the file."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise InvalidSpec(str(path), f"cannot parse config: {exc}") from None
    for name in cp.sections():
        if name not in _KEYS:
            raise InvalidSpec(name, "unknown config section")
        for key in cp[name]:
            if key not in _KEYS[name]:
                raise InvalidSpec(f"{name}.{key}", "unknown config key")

    ds = dataset or (cp["pipeline"].get("dataset") if cp.has_section("pipeline") else None) or "tj4d"
    cfg = for_dataset(ds)
    changes = {}

    if cp.has_section("pipeline"):
        sec = cp["pipeline"]
        if "seed" in sec:
            changes["seed"] = _int(sec, "seed")
        if "threads" in sec:
            changes["threads"] = _int(sec, "threads", 1)

    if cp.has_section("surface_fit"):
        sec = cp["surface_fit"]
        fit = {}
        if "shape" in sec:
            fit["shape"] = sec["shape"].strip()
        if "lambda" in sec:
            fit["lam"] = _float(sec, "lambda")
        if "ridge" in sec:
            fit["ridge"] = _float(sec, "ridge")
        if "cond_max" in sec:
            fit["cond_max"] = _float(sec, "cond_max")
        try:
            changes["fit"] = replace(cfg.fit, **fit)
        except ValueError as exc:
            raise InvalidSpec("surface_fit", str(exc)) from None

    if cp.has_section("densify") and "stride" in cp["densify"]:
        changes["stride"] = _int(cp["densify"], "stride", 1)

    if cp.has_section("pillars"):
        sec = cp["pillars"]
        if "n_per_pillar" in sec:
            changes["n_per_pillar"] = _int(sec, "n_per_pillar", 1)
        g = cfg.grid
        parts = {k: _pair(sec, k) if k in sec else getattr(g, k) for k in ("x_range", "y_range", "z_range", "cell_size")}
        try:
            changes["grid"] = BevGridSpec(**parts)
        except ValueError as exc:
            raise InvalidSpec("pillars", str(exc)) from None

    if cp.has_section("liftsplat"):
        sec = cp["liftsplat"]
        b = cfg.bins
        try:
            changes["bins"] = DepthBinSpec(
                _float(sec, "d_min") if "d_min" in sec else b.d_min,
                _float(sec, "d_max") if "d_max" in sec else b.d_max,
                _int(sec, "n_bins", 1) if "n_bins" in sec else b.n_bins)
        except ValueError as exc:
            if isinstance(exc, InvalidSpec):
                raise
            raise InvalidSpec("liftsplat", str(exc)) from None
        if "mode" in sec:
            mode = sec["mode"].strip()
            if mode not in MODES:
                raise InvalidSpec("liftsplat.mode", f"expected one of {MODES}")
            changes["lift_mode"] = mode
        if "sigma" in sec:
            changes["lift_sigma"] = _float(sec, "sigma")
        if "downsample" in sec:
            changes["downsample"] = _int(sec, "downsample", 1)

    if cp.has_section("boxcodec"):
        sec = cp["boxcodec"]
        lw = {k: _float(sec, k) for k in _KEYS["boxcodec"] if k in sec}
        try:
            changes["loss"] = replace(cfg.loss, **lw)
        except ValueError as exc:
            raise InvalidSpec("boxcodec", str(exc)) from None

    return replace(cfg, **changes)
