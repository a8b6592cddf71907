"""Command-line entry point tying the pipeline stages together.

Subcommands: calibrate (eye-to-hand camera pose), synth (synthetic torso
cohorts), fuse (depth maps to an oriented cloud), fit (ratio parameters
from a scene cohort), localize (scan-target poses for one scene), and
evaluate (leave-one-out reports).  Usage errors exit 2, data errors exit
1, success exits 0.  Everything needed to reproduce a run (seeds and
resolved settings) is logged to stderr and echoed into the reports.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .cloud import DEFAULT_VOXEL, FusedCloud, fuse
from .errors import ConfigError, ScanlocError
from .evaluation import (
    DEFAULT_EVAL_VOXEL,
    DEFAULT_THRESHOLDS_MM,
    _fit_for_target,
    _scene_fault,
    _scene_sample,
    backprojection_comparison,
    loocv,
    median_backprojection_errors,
    pose_kind_for_target,
    success_table,
    summarize,
    write_backprojection_csv,
    write_folds_csv,
    write_success_csv,
    write_summary_json,
)
from .geometry import PinholeCamera
from .handeye import build_motion_pairs, estimate_camera_pose, load_samples, mean_residual
from .synth import (
    NoiseSpec,
    _validate_ranges,
    default_ratios,
    generate_cohort_scene,
    load_cohort,
    load_scene,
    save_scene,
)
from .targets import (
    FitDataset,
    ReferenceAxes,
    SgdConfig,
    TargetModelParams,
    localize,
    params_from_dict,
    save_params,
)

log = logging.getLogger("scanloc")

_SYNTH_KEYS = {"n", "seed", "pose", "torso", "ratios", "noise", "cameras"}


def _require_exists(path, what: str) -> None:
    if not os.path.exists(path):
        raise ConfigError(f"{what} does not exist: {path}")


def _load_json(path, what: str) -> dict:
    _require_exists(path, what)
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON: {exc}") from exc


def _scene_dir(path) -> str:
    """Accept either a scene directory or the scene.json inside it."""
    if os.path.isdir(path):
        return path
    if os.path.basename(path) == "scene.json" and os.path.isfile(path):
        return os.path.dirname(path) or "."
    raise ConfigError(f"not a scene directory or scene.json: {path}")


def _parse_thresholds(text: str):
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            count = int(round((stop - start) / step))
            values = [start + i * step for i in range(count + 1)
                      if start + i * step <= stop + 1e-9]
        else:
            values = [float(x) for x in text.split(",")]
        if not values or any(v <= 0 for v in values):
            raise ValueError
        return tuple(values)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"thresholds must be start:stop:step or a comma list of mm, got {text!r}"
        )


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one fit/evaluate run, echoed into reports."""

    target_id: int
    voxel: float
    normal_neighbors: int
    sgd: SgdConfig
    thresholds_mm: tuple = ()
    jobs: int = 1

    def to_dict(self) -> dict:
        # jobs is deliberately absent: reports must not depend on worker count
        return {
            "target_id": self.target_id,
            "voxel_m": self.voxel,
            "normal_neighbors": self.normal_neighbors,
            "sgd": {
                "learning_rate": self.sgd.learning_rate,
                "iterations": self.sgd.iterations,
                "seed": self.sgd.seed,
            },
            "thresholds_mm": list(self.thresholds_mm),
        }


def _sgd_from_args(args) -> SgdConfig:
    return SgdConfig(
        learning_rate=args.sgd_lr, iterations=args.sgd_iterations, seed=args.sgd_seed
    )


# subcommand handlers -----------------------------------------------------------


def _cmd_calibrate(args) -> int:
    _require_exists(args.samples, "samples file")
    samples = load_samples(args.samples)
    pose = estimate_camera_pose(samples, all_pairs=args.all_pairs)
    residual = mean_residual(build_motion_pairs(samples, all_pairs=args.all_pairs), pose)
    log.info(
        "calibrated from %d samples (all_pairs=%s): mean rotation residual %.3e rad",
        len(samples), args.all_pairs, residual,
    )
    output = {"pose": pose.to_dict()}
    if args.intrinsics:
        intrinsics = _load_json(args.intrinsics, "intrinsics file")
        output = PinholeCamera.from_dict({**intrinsics, "pose": pose.to_dict()}).to_dict()
    with open(args.out, "w") as fh:
        json.dump(output, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %s", args.out)
    return 0


def _parse_synth_config(path):
    data = _load_json(path, "synth config")
    unknown = set(data) - _SYNTH_KEYS
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    if "n" not in data:
        raise ConfigError("synth config needs 'n' (number of scenes)")
    n = int(data["n"])
    seed = int(data.get("seed", 0))
    pose_kind = str(data.get("pose", "front"))
    ranges = _validate_ranges(data.get("torso", {}))
    if "ratios" in data:
        ratios, axes = params_from_dict(data["ratios"])
        if not ratios.front and ratios.side is None:
            raise ConfigError("synth config ratios name no targets")
    else:
        ratios, axes = default_ratios(), None
    noise = NoiseSpec.from_dict(data.get("noise", {}))
    cameras = None
    if "cameras" in data:
        if len(data["cameras"]) != 2:
            raise ConfigError("synth config needs exactly two cameras")
        cameras = tuple(PinholeCamera.from_dict(c) for c in data["cameras"])
    return n, seed, pose_kind, ranges, ratios, noise, cameras, axes


def _cmd_synth(args) -> int:
    n, seed, pose_kind, ranges, ratios, noise, cameras, axes = _parse_synth_config(
        args.config
    )
    log.info(
        "generating %d %s-pose scenes, master seed %d, jobs %d",
        n, pose_kind, seed, args.jobs,
    )
    make = functools.partial(
        generate_cohort_scene, master_seed=seed, ranges=ranges, ratios=ratios,
        noise=noise, pose_kind=pose_kind, cameras=cameras, axes=axes,
    )
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            scenes = list(pool.map(make, range(n)))
    else:
        scenes = [make(i) for i in range(n)]
    for scene in scenes:
        save_scene(scene, os.path.join(args.out, f"scene_{scene.scene_id:03d}"))
    log.info("wrote %d scenes to %s", n, args.out)
    return 0


def _cmd_fuse(args) -> int:
    scene = load_scene(_scene_dir(args.scene))
    cloud = fuse(
        list(zip(scene.cameras, scene.depths)),
        voxel=args.voxel, normal_neighbors=args.neighbors,
    )
    cloud.save(args.out)
    log.info(
        "fused scene %d at %.1f mm voxel: %d points -> %s",
        scene.scene_id, 1000 * args.voxel, len(cloud.points), args.out,
    )
    return 0


def _cmd_fit(args) -> int:
    _require_exists(args.dataset, "dataset directory")
    scenes = load_cohort(args.dataset)
    sgd = _sgd_from_args(args)
    samples = []
    for scene in scenes:
        fault = _scene_fault(scene, args.target)
        if fault:
            log.warning("skipping scene %d: %s", scene.scene_id, fault)
            continue
        samples.append(_scene_sample(scene, args.target))
    axes = ReferenceAxes()
    result = _fit_for_target(FitDataset(samples), args.target, axes, sgd)
    if pose_kind_for_target(args.target) == "front":
        params = TargetModelParams(front={args.target: result.ratios})
    else:
        params = TargetModelParams(side=result.ratios)
    save_params(args.out, params, axes)
    log.info(
        "fitted target %d on %d scenes (sgd seed %d): segment %.6f offset %.6f, "
        "mean planar residual %.3f mm -> %s",
        args.target, len(samples), sgd.seed, result.ratios.segment_ratio,
        result.ratios.offset_ratio, 1000 * result.mean_planar_residual, args.out,
    )
    return 0


def _cmd_localize(args) -> int:
    scene = load_scene(_scene_dir(args.scene))
    params_data = _load_json(args.params, "params file")
    params, axes = params_from_dict(params_data)
    cloud = fuse(
        list(zip(scene.cameras, scene.depths)),
        voxel=args.voxel, normal_neighbors=args.neighbors,
    )
    poses = localize(
        scene.cameras[0], scene.cameras[1], scene.observation, cloud,
        params, args.pose, axes=axes,
    )
    output = {
        "scene_id": scene.scene_id,
        "pose_kind": args.pose,
        "voxel_m": args.voxel,
        "normal_neighbors": args.neighbors,
        "targets": [p.to_dict() for p in poses],
    }
    with open(args.out, "w") as fh:
        json.dump(output, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for p in poses:
        log.info(
            "target %d at (%.4f, %.4f, %.4f) m%s",
            p.target_id, p.x, p.y, p.z,
            " [far from surface]" if p.far_from_surface else "",
        )
    log.info("wrote %s", args.out)
    return 0


def _fuse_scene_dir(directory, voxel: float, neighbors: int) -> FusedCloud:
    scene = load_scene(directory)
    return fuse(
        list(zip(scene.cameras, scene.depths)),
        voxel=voxel, normal_neighbors=neighbors,
    )


def _cmd_evaluate(args) -> int:
    _require_exists(args.scenes, "scenes directory")
    dirs = [
        os.path.join(args.scenes, name)
        for name in sorted(os.listdir(args.scenes))
        if name.startswith("scene_")
        and os.path.isdir(os.path.join(args.scenes, name))
    ]
    if not dirs:
        raise ConfigError(f"no scene_* directories under {args.scenes}")
    scenes = [load_scene(d) for d in dirs]
    config = RunConfig(
        target_id=args.target, voxel=args.voxel, normal_neighbors=args.neighbors,
        sgd=_sgd_from_args(args), thresholds_mm=args.thresholds, jobs=args.jobs,
    )
    log.info("evaluate config: %s", json.dumps(config.to_dict(), sort_keys=True))
    worker = functools.partial(
        _fuse_scene_dir, voxel=args.voxel, neighbors=args.neighbors
    )
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            clouds = list(pool.map(worker, dirs))
    else:
        clouds = [worker(d) for d in dirs]

    folds = loocv(
        scenes, args.target, voxel=args.voxel, normal_neighbors=args.neighbors,
        sgd=config.sgd, clouds=clouds,
    )
    table = success_table(folds, args.thresholds)
    summary = summarize(folds)
    results = []
    for scene, cloud in zip(scenes, clouds):
        results.extend(
            r for r in backprojection_comparison(scene, cloud=cloud)
            if r.target_id == args.target
        )

    os.makedirs(args.out, exist_ok=True)
    write_folds_csv(folds, os.path.join(args.out, "folds.csv"))
    write_success_csv(table, os.path.join(args.out, "success_table.csv"))
    write_backprojection_csv(results, os.path.join(args.out, "backprojection.csv"))
    summary_out = {
        "config": config.to_dict(),
        "n_scenes": len(scenes),
        "backprojection_median_px": median_backprojection_errors(results).get(
            args.target, {}
        ),
        **summary,
    }
    write_summary_json(summary_out, os.path.join(args.out, "summary.json"))
    log.info(
        "target %d: %d/%d valid folds, mean position %.2f mm, mean normal %.2f deg",
        args.target, summary["n_valid"], summary["n_folds"],
        summary["position_mm"]["mean"], summary["orientation_deg"]["mean"],
    )
    log.info("wrote reports to %s", args.out)
    return 0


# parser ------------------------------------------------------------------------


def _add_sgd_flags(parser) -> None:
    parser.add_argument("--sgd-lr", type=float, default=SgdConfig.learning_rate,
                        help="SGD learning rate for the side-target fit")
    parser.add_argument("--sgd-iterations", type=int, default=SgdConfig.iterations,
                        help="SGD iteration count")
    parser.add_argument("--sgd-seed", type=int, default=SgdConfig.seed,
                        help="SGD shuffle seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scanloc",
        description="Scan-target localization pipeline: calibration, synthesis, "
                    "fusion, fitting, localization, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="solve the eye-to-hand camera pose")
    p.add_argument("--samples", required=True, help="JSON array of pose-pair samples")
    p.add_argument("--out", required=True, help="output calibration JSON")
    p.add_argument("--intrinsics", help="JSON with fx, fy, cx, cy, width, height "
                                        "to embed alongside the solved pose")
    p.add_argument("--all-pairs", action="store_true",
                   help="use every sample pair instead of consecutive ones")
    p.set_defaults(handler=_cmd_calibrate)

    p = sub.add_parser("synth", help="generate a synthetic scene cohort")
    p.add_argument("--config", required=True, help="cohort config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes; results are independent of this")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("fuse", help="fuse a scene's depth maps into a cloud")
    p.add_argument("--scene", required=True, help="scene directory or scene.json")
    p.add_argument("--out", required=True, help="output cloud file")
    p.add_argument("--voxel", type=float, default=DEFAULT_VOXEL,
                   help="voxel edge in meters")
    p.add_argument("--neighbors", type=int, default=30,
                   help="neighborhood size for normal estimation")
    p.set_defaults(handler=_cmd_fuse)

    p = sub.add_parser("fit", help="fit ratio parameters on a scene cohort")
    p.add_argument("--dataset", required=True, help="cohort directory")
    p.add_argument("--target", type=int, choices=(1, 2, 4), required=True)
    p.add_argument("--out", required=True, help="output params JSON")
    _add_sgd_flags(p)
    p.set_defaults(handler=_cmd_fit)

    p = sub.add_parser("localize", help="localize scan targets in one scene")
    p.add_argument("--scene", required=True, help="scene directory or scene.json")
    p.add_argument("--params", required=True, help="fitted params JSON")
    p.add_argument("--pose", choices=("front", "side"), required=True)
    p.add_argument("--out", required=True, help="output poses JSON")
    p.add_argument("--voxel", type=float, default=DEFAULT_VOXEL)
    p.add_argument("--neighbors", type=int, default=30)
    p.set_defaults(handler=_cmd_localize)

    p = sub.add_parser("evaluate", help="leave-one-out evaluation reports")
    p.add_argument("--scenes", required=True, help="cohort directory")
    p.add_argument("--target", type=int, choices=(1, 2, 4), required=True)
    p.add_argument("--thresholds", type=_parse_thresholds,
                   default=DEFAULT_THRESHOLDS_MM,
                   help="success thresholds in mm, start:stop:step or comma list")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--voxel", type=float, default=DEFAULT_EVAL_VOXEL)
    p.add_argument("--neighbors", type=int, default=30)
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes for fusion; results are independent")
    _add_sgd_flags(p)
    p.set_defaults(handler=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ScanlocError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
