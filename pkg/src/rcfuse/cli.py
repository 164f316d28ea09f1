"""Command-line driver: ``rcfuse <stage> ...``.

Stages chain through files::

    synth      scene.json          -> calib.txt masks.pgm gt_depth.sfgd cloud.sfgc
    fit        calib cloud masks   -> fit report (JSON, carries coefficients)
    densify    fit report + masks  -> pseudo-point cloud (.sfgc, xyz schema)
    pillarize  any cloud           -> pillar tensor (.sfgp)
    lift       fit report + masks  -> image-branch BEV tensor (.sfgb)
    bev        pillar tensor(s)    -> BEV tensor (.sfgb), optionally concatenated
    eval       seeded fit-method comparison report (JSON)

Exit codes: 0 success, 2 usage or input error, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace

import numpy as np

from . import storage
from .config import PipelineConfig, load_config
from .densify import augment_points, densify_instance
from .errors import InvalidSpec, InvariantViolation, RcfuseError
from .geometry import collect_reference_points
from .liftsplat import build_depth_distribution, lift, splat
from .metrics import DepthErrorReport, average_method, compare_fit_methods, lsq_method
from .pillars import XYZ, apply_channel_map, augment_radar_points, concat_bev, pillarize, scatter_max
from .surface_fit import (SHAPES, SurfaceCoefficients, build_depth_enhanced_mask, fit_surface,
                          instance_loss, predict_mask_depth)
from .synth import scene_from_spec, scene_radar_cloud

log = logging.getLogger("rcfuse")

REPORT_VERSION = 1
SYNTH_FILES = ("calib.txt", "masks.pgm", "gt_depth.sfgd", "cloud.sfgc")


class StageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        with storage.atomic_open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _config(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "dataset", None))
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise InvalidSpec("--threads", "must be >= 1")
        changes["threads"] = args.threads
    fit = {}
    if getattr(args, "shape", None) is not None:
        fit["shape"] = args.shape
    if getattr(args, "lam", None) is not None:
        fit["lam"] = args.lam
    if getattr(args, "ridge", None) is not None:
        fit["ridge"] = args.ridge
    if fit:
        try:
            changes["fit"] = replace(cfg.fit, **fit)
        except ValueError as exc:
            raise InvalidSpec("surface_fit", str(exc)) from None
    if getattr(args, "stride", None) is not None:
        if args.stride < 1:
            raise InvalidSpec("--stride", "must be >= 1")
        changes["stride"] = args.stride
    if getattr(args, "n_per_pillar", None) is not None:
        if args.n_per_pillar < 1:
            raise InvalidSpec("--n-per-pillar", "must be >= 1")
        changes["n_per_pillar"] = args.n_per_pillar
    return replace(cfg, **changes)


def _load_fit_report(path):
    with open(path, encoding="utf-8") as fh:
        try:
            report = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidSpec(str(path), f"not a JSON fit report: {exc}") from None
    if report.get("command") != "fit" or "instances" not in report:
        raise InvalidSpec(str(path), "not a fit report")
    coefs = {}
    for entry in report["instances"]:
        if entry.get("status") == "ok":
            coefs[int(entry["instance_id"])] = SurfaceCoefficients.from_dict(entry)
    return report, coefs


# --- stages ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidSpec(str(args.spec), f"invalid JSON: {exc}") from None
    scene = scene_from_spec(spec, seed=args.seed)
    radar = scene.radar
    from .pillars import SCHEMAS
    schema = SCHEMAS[radar["schema"]]
    cloud = scene_radar_cloud(scene, radar["n_per_instance"], radar["noise_sigma"], args.seed, schema)

    os.makedirs(args.out_dir, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".synth-", dir=args.out_dir)
    try:
        storage.write_calibration(os.path.join(stage, SYNTH_FILES[0]), scene.camera, scene.extrinsics)
        storage.write_masks(os.path.join(stage, SYNTH_FILES[1]), scene.masks, (scene.camera.width, scene.camera.height))
        storage.write_depth(os.path.join(stage, SYNTH_FILES[2]), scene.gt_depth)
        storage.write_cloud(os.path.join(stage, SYNTH_FILES[3]), cloud, schema)
        for name in SYNTH_FILES:
            os.replace(os.path.join(stage, name), os.path.join(args.out_dir, name))
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    _emit({"command": "synth", "version": REPORT_VERSION, "seed": args.seed, "files": list(SYNTH_FILES),
           "n_instances": len(scene.masks), "n_points": int(len(cloud))}, None)
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args)
    cam, t_radar_to_cam = storage.read_calibration(args.calib)
    cloud, _schema = storage.read_cloud(args.cloud)
    masks = storage.read_masks(args.masks)
    gt = storage.read_depth(args.gt_depth) if args.gt_depth else None
    if gt is not None and gt.shape != (cam.height, cam.width):
        raise InvalidSpec(str(args.gt_depth), "ground-truth depth size differs from the calibration image size")

    xyz = cloud[:, :3].astype(np.float64)
    entries, pairs, errors = [], [], DepthErrorReport()
    total = 0.0
    for mask in masks:
        refs = collect_reference_points(xyz, t_radar_to_cam, cam, mask)
        pairs.append((mask, refs))
        entry = {"instance_id": mask.instance_id, "n_refs": len(refs), "n_pixels": len(mask)}
        if len(refs) == 0:
            entry["status"] = "skipped: no references"
            entries.append(entry)
            continue
        try:
            coef = fit_surface(refs, mask, cfg.fit)
        except RcfuseError as exc:
            entry["status"] = f"error: {exc}"
            entries.append(entry)
            continue
        loss = instance_loss(refs, mask, coef, cfg.fit.lam)
        total += loss
        entry.update(coef.to_dict())
        entry.update({"status": "ok", "L_sf": loss, "mean_ref_depth": float(refs.d.mean()),
                      "mean_pred_depth": float(predict_mask_depth(coef, mask).mean())})
        if gt is not None:
            e = errors.add(mask, coef, gt)
            entry["rmse"] = e.rmse
            entry["mae"] = e.mae
        entries.append(entry)

    md = build_depth_enhanced_mask(pairs, (cam.width, cam.height))
    report = {
        "command": "fit",
        "version": REPORT_VERSION,
        "config": {"shape": cfg.fit.shape, "lambda": cfg.fit.lam, "ridge": cfg.fit.ridge, "cond_max": cfg.fit.cond_max},
        "image_size": [cam.width, cam.height],
        "instances": entries,
        "aggregate": {"L_sf": total, "n_fitted": sum(e["status"] == "ok" for e in entries),
                      "n_foreground_with_depth": int(np.count_nonzero(md))},
    }
    if gt is not None and errors.instances:
        report["aggregate"]["rmse"] = errors.mean_rmse
        report["aggregate"]["mae"] = errors.mean_mae
    _emit(report, args.out)
    return 0


def cmd_densify(args) -> int:
    cfg = _config(args)
    cam, t_radar_to_cam = storage.read_calibration(args.calib)
    masks = storage.read_masks(args.masks)
    _report, coefs = _load_fit_report(args.fit)
    cam_to_radar = t_radar_to_cam.inverse()
    parts, per = [], []
    for mask in masks:
        coef = coefs.get(mask.instance_id)
        if coef is None:
            per.append({"instance_id": mask.instance_id, "n_points": 0, "status": "no coefficients"})
            continue
        pts = densify_instance(mask, coef, cam, cam_to_radar, cfg.stride, cfg.depth_range)
        parts.append(pts)
        per.append({"instance_id": mask.instance_id, "n_points": int(len(pts)), "status": "ok"})
    pts = np.concatenate(parts) if parts else np.zeros((0, 3))
    storage.write_cloud(args.out, pts, XYZ)
    _emit({"command": "densify", "version": REPORT_VERSION, "stride": cfg.stride,
           "n_points": int(len(pts)), "instances": per}, None)
    return 0


def cmd_pillarize(args) -> int:
    cfg = _config(args)
    cloud, schema = storage.read_cloud(args.cloud)
    grid = cfg.grid
    if schema is XYZ:
        xyz = cloud.astype(np.float64)
        xyz = xyz[grid.in_range(xyz)]
        feats = augment_points(xyz, grid)
    else:
        feats = augment_radar_points(cloud.astype(np.float64), schema, grid)
    t = pillarize(feats, grid, cfg.n_per_pillar, cfg.seed, cfg.threads)
    storage.write_pillars(args.out, t, grid)
    _emit({"command": "pillarize", "version": REPORT_VERSION, "schema": schema.name,
           "n_points": int(len(cloud)), "n_in_range": int(len(feats)), "n_pillars": t.n_pillars,
           "n_features": t.n_features, "n_per_pillar": t.n_per_pillar,
           "grid": {"W": grid.W, "H": grid.H}}, None)
    return 0


def cmd_bev(args) -> int:
    t, grid = storage.read_pillars(args.pillars)
    cmap = storage.read_channel_map(args.channel_map) if args.channel_map else None
    extra = [storage.read_bev(p) for p in (args.concat or [])]
    bev = scatter_max(apply_channel_map(t, cmap), grid)
    if extra:
        bev = concat_bev(bev, *extra)
    storage.write_bev(args.out, bev)
    c, h, w = bev.data.shape
    _emit({"command": "bev", "version": REPORT_VERSION, "C": c, "H": h, "W": w}, None)
    return 0


def _sample_blocks(img: np.ndarray, k: int) -> np.ndarray:
    """Nearest-sample an image at the centre pixel of each k x k block."""
    h, w = img.shape
    hs, ws = np.arange(h // k) * k + k // 2, np.arange(w // k) * k + k // 2
    return img[np.ix_(hs, ws)]


def cmd_lift(args) -> int:
    cfg = _config(args)
    if args.downsample is not None:
        if args.downsample < 1:
            raise InvalidSpec("--downsample", "must be >= 1")
        cfg = replace(cfg, downsample=args.downsample)
    cam, t_radar_to_cam = storage.read_calibration(args.calib)
    masks = storage.read_masks(args.masks)
    report, coefs = _load_fit_report(args.fit)
    h, w = cam.height, cam.width
    depth = np.zeros((h, w))
    md = np.zeros((h, w))
    fg = np.zeros((h, w))
    means = {int(e["instance_id"]): e["mean_ref_depth"] for e in report["instances"] if e.get("status") == "ok"}
    for mask in masks:
        coef = coefs.get(mask.instance_id)
        if coef is None:
            continue
        depth[mask.v, mask.u] = predict_mask_depth(coef, mask)
        md[mask.v, mask.u] = means[mask.instance_id]
        fg[mask.v, mask.u] = 1.0
    k = cfg.downsample
    depth_s, md_s, fg_s = (_sample_blocks(x, k) for x in (depth, md, fg))
    if depth_s.size == 0:
        raise InvalidSpec("--downsample", "larger than the image")
    cam_s = cam.scaled(1.0 / k, width=depth_s.shape[1], height=depth_s.shape[0])
    dist = build_depth_distribution(depth_s, cfg.bins, cfg.lift_mode,
                                    cfg.lift_sigma if cfg.lift_mode == "gaussian" else None)
    frustum = lift(np.stack([md_s, fg_s]), dist)
    bev = splat(frustum, cam_s, t_radar_to_cam.inverse(), cfg.bins, cfg.grid, cfg.threads)
    storage.write_bev(args.out, bev)
    c, hh, ww = bev.data.shape
    _emit({"command": "lift", "version": REPORT_VERSION, "C": c, "H": hh, "W": ww,
           "feature_map": [int(depth_s.shape[0]), int(depth_s.shape[1])], "n_bins": cfg.bins.n_bins,
           "n_demoted": dist.n_demoted, "mode": cfg.lift_mode}, None)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    lam = cfg.fit.lam
    methods = [lsq_method("quadratic", lam, cfg.fit.ridge), lsq_method("plane", lam, cfg.fit.ridge), average_method()]
    report = compare_fit_methods(args.kind, methods, args.trials, cfg.seed, args.refs, args.sigma)
    report["command"] = "eval"
    report["version"] = REPORT_VERSION
    report["kind"] = args.kind
    if not args.per_trial:
        for m in report["methods"]:
            del m["rmse"]
    _emit(report, args.out)
    return 0


# --- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcfuse", description="Camera/4D-radar surface-fitting preprocessing pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--dataset", choices=["tj4d", "vod"], help="dataset preset (grid, schema)")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--threads", type=int)

    sp = sub.add_parser("synth", help="render a synthetic scene from a JSON spec")
    sp.add_argument("spec")
    sp.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="fit per-instance surfaces")
    common(sp)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--gt-depth")
    sp.add_argument("--shape", choices=SHAPES)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--ridge", type=float)
    sp.add_argument("--out", help="report path (default stdout)")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("densify", help="generate the pseudo-point cloud")
    common(sp)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--fit", required=True, help="fit report JSON")
    sp.add_argument("--stride", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_densify)

    sp = sub.add_parser("pillarize", help="augment a cloud and group it into pillars")
    common(sp)
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--n-per-pillar", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pillarize)

    sp = sub.add_parser("lift", help="lift-splat the PV depth features into BEV")
    common(sp)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--downsample", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_lift)

    sp = sub.add_parser("bev", help="scatter a pillar tensor to BEV")
    sp.add_argument("--pillars", required=True)
    sp.add_argument("--channel-map", help="SFGW weight file (default identity)")
    sp.add_argument("--concat", nargs="*", help="BEV tensors to append along channels")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bev)

    sp = sub.add_parser("eval", help="paired comparison of fitting methods on seeded synthetic instances")
    common(sp, seed_default=None)
    sp.add_argument("--kind", choices=["sphere", "plane", "quadratic"], default="sphere")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--refs", type=int, default=10)
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--ridge", type=float)
    sp.add_argument("--per-trial", action="store_true", help="include per-trial RMSE lists")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s")
    stage = args.command
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"rcfuse {stage}: internal error: {exc}", file=sys.stderr)
        return 3
    except (RcfuseError, OSError) as exc:
        print(f"rcfuse {stage}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        print(f"rcfuse {stage}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
