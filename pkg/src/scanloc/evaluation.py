"""Leave-one-out evaluation, success tables, and back-projection comparison.

A fold fits the ratio parameters on every scene but one, localizes the
held-out scene, and scores position (3D Euclidean, mm) and orientation
(angle between predicted and true surface normal, degrees).  Scenes whose
required joints are missing or known-corrupt are "faulty": they are kept
out of every training set, reported with no error values, and counted as
failures (never successes) in success-rate tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .cloud import FusedCloud, adjust_target, fuse
from .errors import (
    InsufficientDataError,
    MissingPixelError,
    NoValidFoldsError,
)
from .geometry import Pixel, angle_between_degrees, triangulate
from .synth import SyntheticScene
from .targets import (
    FitDataset,
    FitSample,
    Keypoints3D,
    RatioPair,
    ReferenceAxes,
    SgdConfig,
    TargetModelParams,
    fit_front,
    fit_side,
    localize,
    required_joints,
    triangulate_joints,
)

FRONT_TARGETS = (1, 2)
DEFAULT_THRESHOLDS_MM = tuple(float(t) for t in range(5, 45, 5))
DEFAULT_EVAL_VOXEL = 0.002
NEAREST_PIXEL_RADIUS = 2


def pose_kind_for_target(target_id: int) -> str:
    if target_id in FRONT_TARGETS:
        return "front"
    if target_id == 4:
        return "side"
    raise ValueError(f"unsupported target id {target_id}; expected 1, 2 or 4")


@dataclass(frozen=True)
class FoldResult:
    """Outcome of one leave-one-out fold for one target."""

    scene_id: int
    target_id: int
    faulty: bool
    fault_reason: str = ""
    position_error_mm: float = float("nan")
    normal_error_deg: float = float("nan")
    fitted: RatioPair | None = None
    fit_residual_mm: float = float("nan")


@dataclass(frozen=True)
class SuccessTable:
    """Success rate per (threshold, target); faulty folds never succeed."""

    thresholds_mm: tuple
    rates: dict  # target_id -> tuple of rates aligned with thresholds_mm
    counts: dict  # target_id -> number of folds

    def rate(self, target_id: int, threshold_mm: float) -> float:
        return self.rates[target_id][self.thresholds_mm.index(threshold_mm)]


def _scene_fault(scene: SyntheticScene, target_id: int) -> str:
    """Why this scene cannot supply a valid sample for `target_id`, or ''."""
    needed = required_joints(pose_kind_for_target(target_id))
    for joint in needed:
        if joint in scene.faulted_joints:
            return f"{joint} {scene.faulted_joints[joint]}"
    for joint in needed:
        for vi, camera in enumerate(scene.cameras):
            if scene.observation.joint_in_view(joint, vi, camera) is None:
                return f"{joint} not visible in view {vi}"
    return ""


def _scene_sample(scene: SyntheticScene, target_id: int) -> FitSample:
    """Triangulated keypoints + ground-truth target, as one fit sample.

    Raises ValueError when the triangulated joints are not human-scale
    (a grossly displaced detection); callers treat that as a fault.
    """
    positions = triangulate_joints(scene.cameras[0], scene.cameras[1], scene.observation)
    kps = Keypoints3D(
        left_shoulder=positions.get("left_shoulder"),
        right_shoulder=positions.get("right_shoulder"),
        right_hip=positions.get("right_hip"),
    )
    return FitSample(
        keypoints=kps, target=scene.targets_true[target_id], scene_id=scene.scene_id
    )


def _fit_for_target(dataset: FitDataset, target_id: int, axes: ReferenceAxes,
                    sgd: SgdConfig):
    if pose_kind_for_target(target_id) == "front":
        return fit_front(dataset, fallback_reference=axes.front)
    return fit_side(dataset, reference=axes.side, sgd=sgd)


def _fold_seed(base_seed: int, fold_index: int) -> int:
    """A per-fold SGD seed that does not depend on execution order."""
    return int(np.random.SeedSequence(entropy=base_seed, spawn_key=(fold_index,))
               .generate_state(1)[0])


def scene_cloud(scene: SyntheticScene, voxel: float = DEFAULT_EVAL_VOXEL,
                normal_neighbors: int = 30) -> FusedCloud:
    return fuse(list(zip(scene.cameras, scene.depths)), voxel=voxel,
                normal_neighbors=normal_neighbors)


def loocv(scenes, target_id: int, voxel: float = DEFAULT_EVAL_VOXEL,
          normal_neighbors: int = 30, sgd: SgdConfig = SgdConfig(),
          axes: ReferenceAxes | None = None, clouds=None) -> list[FoldResult]:
    """Leave-one-out folds over the scenes, in scene order.

    `clouds`, when given, must align 1:1 with `scenes` (precomputed fused
    clouds); otherwise each held-out scene is fused on demand.  Fold i is
    independent of every other fold, and its SGD seed is derived from
    (sgd.seed, i), so parallel execution cannot change results.
    """
    pose_kind = pose_kind_for_target(target_id)
    scenes = list(scenes)
    if len(scenes) < 2:
        raise InsufficientDataError(f"leave-one-out needs >= 2 scenes, got {len(scenes)}")
    for scene in scenes:
        if target_id not in scene.targets_true:
            raise InsufficientDataError(
                f"scene {scene.scene_id} has no ground truth for target {target_id}"
            )
    axes = axes or ReferenceAxes()

    faults = [_scene_fault(scene, target_id) for scene in scenes]
    samples = []
    for i, scene in enumerate(scenes):
        if faults[i]:
            samples.append(None)
            continue
        try:
            samples.append(_scene_sample(scene, target_id))
        except ValueError as exc:
            faults[i] = f"implausible keypoints: {exc}"
            samples.append(None)

    folds = []
    for i, scene in enumerate(scenes):
        if faults[i]:
            folds.append(FoldResult(scene.scene_id, target_id, True, faults[i]))
            continue
        training = [s for j, s in enumerate(samples) if j != i and s is not None]
        # leak check: the held-out scene must not appear in the training set
        assert all(s.scene_id != scene.scene_id for s in training)
        if not training:
            folds.append(
                FoldResult(scene.scene_id, target_id, True, "no valid training scenes")
            )
            continue
        fold_sgd = replace(sgd, seed=_fold_seed(sgd.seed, i))
        fit = _fit_for_target(FitDataset(training), target_id, axes, fold_sgd)

        if pose_kind == "front":
            params = TargetModelParams(front={target_id: fit.ratios})
        else:
            params = TargetModelParams(side=fit.ratios)
        cloud = clouds[i] if clouds is not None else scene_cloud(
            scene, voxel=voxel, normal_neighbors=normal_neighbors
        )
        poses = localize(
            scene.cameras[0], scene.cameras[1], scene.observation, cloud,
            params, pose_kind, axes=axes,
        )
        (pose,) = [p for p in poses if p.target_id == target_id]
        gt = scene.targets_true[target_id]
        position_error = 1000.0 * float(np.linalg.norm(pose.position - gt))
        normal_error = angle_between_degrees(
            pose.surface_normal, scene.target_normals_true[target_id]
        )
        folds.append(
            FoldResult(
                scene_id=scene.scene_id,
                target_id=target_id,
                faulty=False,
                position_error_mm=position_error,
                normal_error_deg=float(normal_error),
                fitted=fit.ratios,
                fit_residual_mm=1000.0 * fit.mean_planar_residual,
            )
        )
    return folds


def success_table(folds, thresholds_mm=DEFAULT_THRESHOLDS_MM) -> SuccessTable:
    """Success = valid fold with position error within the threshold."""
    folds = list(folds)
    if not folds:
        raise InsufficientDataError("success table needs at least one fold")
    thresholds = tuple(float(t) for t in thresholds_mm)
    rates, counts = {}, {}
    for target_id in sorted({f.target_id for f in folds}):
        rows = [f for f in folds if f.target_id == target_id]
        counts[target_id] = len(rows)
        rates[target_id] = tuple(
            sum(
                1 for f in rows
                if not f.faulty and f.position_error_mm <= t
            ) / len(rows)
            for t in thresholds
        )
    return SuccessTable(thresholds_mm=thresholds, rates=rates, counts=counts)


def summarize(folds) -> dict:
    """Pooled sample statistics (mean, n-1 std) over valid folds."""
    valid = [f for f in folds if not f.faulty]
    if not valid:
        raise NoValidFoldsError("every fold is faulty; nothing to summarize")
    pos = np.array([f.position_error_mm for f in valid])
    ang = np.array([f.normal_error_deg for f in valid])

    def stats(values):
        return {
            "mean": float(np.mean(values)),
            "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
        }

    return {
        "position_mm": stats(pos),
        "orientation_deg": stats(ang),
        "n_folds": len(list(folds)),
        "n_valid": len(valid),
        "n_faulty": len(list(folds)) - len(valid),
    }


# back-projection comparison ----------------------------------------------------


@dataclass(frozen=True)
class BackprojectionResult:
    """Pixel errors of one target's estimates, projected into both views.

    two_view[v]: error of the triangulated-and-adjusted estimate in view v.
    single_view[k][v]: error in view v of the estimate built from camera
    k's own depth map.
    """

    scene_id: int
    target_id: int
    two_view: tuple
    single_view: tuple


def _nearest_valid_depth(depth_map, pixel: Pixel, radius: int = NEAREST_PIXEL_RADIUS):
    """Depth at the closest valid pixel within `radius` of `pixel`."""
    mask = depth_map.valid_mask
    u0, v0 = int(round(pixel.u)), int(round(pixel.v))
    offsets = sorted(
        (
            (du * du + dv * dv, du, dv)
            for du in range(-radius, radius + 1)
            for dv in range(-radius, radius + 1)
            if du * du + dv * dv <= radius * radius
        ),
    )
    for _, du, dv in offsets:
        u, v = u0 + du, v0 + dv
        if 0 <= u < depth_map.width and 0 <= v < depth_map.height and mask[v, u]:
            return float(depth_map.values[v, u])
    raise MissingPixelError(
        f"no valid depth within {radius} px of ({pixel.u:.1f}, {pixel.v:.1f})"
    )


def _pixel_error(camera, point, truth: Pixel) -> float:
    projected = camera.project(point)
    return float(np.hypot(projected.u - truth.u, projected.v - truth.v))


def backprojection_comparison(scene: SyntheticScene, cloud: FusedCloud | None = None,
                              voxel: float = DEFAULT_EVAL_VOXEL,
                              normal_neighbors: int = 30) -> list[BackprojectionResult]:
    """Two-view vs single-view target estimates, scored in pixel space.

    Both estimates start from the observed target pixels and end with the
    same nearest-neighbor depth adjustment; the single-view estimate reads
    its depth from that camera's own depth map instead of triangulating.
    """
    if cloud is None:
        cloud = scene_cloud(scene, voxel=voxel, normal_neighbors=normal_neighbors)
    results = []
    for target_id in sorted(scene.targets_true):
        observed = [scene.target_pixels_observed[vi][target_id] for vi in (0, 1)]
        truth = [scene.target_pixels_true[vi][target_id] for vi in (0, 1)]

        two_point = triangulate(scene.cameras[0], scene.cameras[1], *observed)
        two_point = adjust_target(cloud, two_point).position
        two_errors = tuple(
            _pixel_error(scene.cameras[vi], two_point, truth[vi]) for vi in (0, 1)
        )

        single_errors = []
        for k in (0, 1):
            depth = _nearest_valid_depth(scene.depths[k], observed[k])
            point = scene.cameras[k].deproject(observed[k], depth)
            point = adjust_target(cloud, point).position
            single_errors.append(
                tuple(_pixel_error(scene.cameras[vi], point, truth[vi]) for vi in (0, 1))
            )
        results.append(
            BackprojectionResult(
                scene_id=scene.scene_id,
                target_id=target_id,
                two_view=two_errors,
                single_view=tuple(single_errors),
            )
        )
    return results


def median_backprojection_errors(results) -> dict:
    """Pooled medians per target: {'two_view': ..., 'single_view': ...}."""
    out = {}
    for target_id in sorted({r.target_id for r in results}):
        rows = [r for r in results if r.target_id == target_id]
        two = [e for r in rows for e in r.two_view]
        single = [e for r in rows for source in r.single_view for e in source]
        out[target_id] = {
            "two_view": float(np.median(two)),
            "single_view": float(np.median(single)),
        }
    return out


# report files ------------------------------------------------------------------


def write_folds_csv(folds, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "scene_id", "target_id", "faulty", "fault_reason",
                "position_error_mm", "normal_error_deg",
                "fitted_segment_ratio", "fitted_offset_ratio", "fit_residual_mm",
            ]
        )
        for f in folds:
            if f.faulty:
                writer.writerow([f.scene_id, f.target_id, 1, f.fault_reason,
                                 "", "", "", "", ""])
            else:
                writer.writerow(
                    [
                        f.scene_id, f.target_id, 0, "",
                        f"{f.position_error_mm:.6f}", f"{f.normal_error_deg:.6f}",
                        f"{f.fitted.segment_ratio:.9f}", f"{f.fitted.offset_ratio:.9f}",
                        f"{f.fit_residual_mm:.6f}",
                    ]
                )


def write_success_csv(table: SuccessTable, path) -> None:
    targets = sorted(table.rates)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold_mm"] + [f"target_{t}" for t in targets])
        for i, threshold in enumerate(table.thresholds_mm):
            writer.writerow(
                [f"{threshold:g}"] + [f"{table.rates[t][i]:.4f}" for t in targets]
            )


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_backprojection_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "target_id", "method", "source_camera", "view",
                         "pixel_error"])
        for r in results:
            for vi, err in enumerate(r.two_view):
                writer.writerow([r.scene_id, r.target_id, "two_view", "", vi,
                                 f"{err:.6f}"])
            for k, errors in enumerate(r.single_view):
                for vi, err in enumerate(errors):
                    writer.writerow([r.scene_id, r.target_id, "single_view", k, vi,
                                     f"{err:.6f}"])
