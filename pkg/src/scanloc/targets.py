"""Scan-target regression from body keypoints, and parameter fitting.

Targets on the chest are modeled relative to two keypoints: walk a ratio
of the way along the keypoint segment, then step sideways along the
horizontal direction perpendicular to that segment.  Front targets (over
the second and fourth rib gaps) hang off the shoulder-to-shoulder segment;
the lateral target (under the armpit) hangs off the right
shoulder-to-right-hip segment, with its sideways step scaled by the
walked distance rather than the whole segment.

Fitting recovers the two ratios per target from examples by minimizing
the mean squared planar (XY) mismatch: a linear least-squares problem for
front targets, a small SGD problem for the lateral one (its sideways
scale makes it nonlinear in the walk ratio).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import FusedCloud, adjust_target
from .errors import (
    AmbiguousSignError,
    ConfigError,
    DegenerateAxisError,
    DegenerateRollError,
    InsufficientSamplesError,
    MissingKeypointError,
    NonFiniteError,
    RankDeficientError,
    ZeroVectorError,
)
from .geometry import (
    PinholeCamera,
    Pixel,
    _check_keys,
    rotation_to_angle_axis,
    triangulate,
)

log = logging.getLogger(__name__)

LEFT_SHOULDER = "left_shoulder"
RIGHT_SHOULDER = "right_shoulder"
RIGHT_HIP = "right_hip"
ALL_JOINTS = (LEFT_SHOULDER, RIGHT_SHOULDER, RIGHT_HIP)

FRONT_TARGET_IDS = (1, 2)
SIDE_TARGET_ID = 4

# Keypoint segments steeper than this against the horizontal plane have no
# usable planar perpendicular.
_VERTICAL_TOL_RAD = 1e-6
_SIGN_TOL = 1e-9
# human-scale sanity bounds on keypoint separations
_MIN_KEYPOINT_DIST = 0.05
_MAX_KEYPOINT_DIST = 1.5


def _opt_vec3(value, name):
    if value is None:
        return None
    v = np.asarray(value, dtype=float).reshape(-1)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be a finite 3-vector")
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class Keypoints3D:
    """Triangulated joint positions in the base frame; absent joints are None."""

    left_shoulder: np.ndarray | None = None
    right_shoulder: np.ndarray | None = None
    right_hip: np.ndarray | None = None

    def __post_init__(self):
        present = []
        for name in ALL_JOINTS:
            v = _opt_vec3(getattr(self, name), name)
            object.__setattr__(self, name, v)
            if v is not None:
                present.append((name, v))
        for i, (name_a, a) in enumerate(present):
            for name_b, b in present[i + 1 :]:
                dist = np.linalg.norm(a - b)
                if not (_MIN_KEYPOINT_DIST <= dist <= _MAX_KEYPOINT_DIST):
                    raise ValueError(
                        f"{name_a}-{name_b} separation {dist:.3f} m is not human-scale"
                    )


@dataclass(frozen=True)
class RatioPair:
    """The two ratios defining one target: walk along the segment, step sideways."""

    segment_ratio: float
    offset_ratio: float

    def __post_init__(self):
        if not (np.isfinite(self.segment_ratio) and np.isfinite(self.offset_ratio)):
            raise ValueError("ratios must be finite")
        if not (-1 < self.segment_ratio < 1 and -1 < self.offset_ratio < 1):
            log.warning(
                "ratio pair (%.4f, %.4f) is outside the expected (-1, 1) range",
                self.segment_ratio,
                self.offset_ratio,
            )


@dataclass(frozen=True)
class TargetModelParams:
    """Fitted ratios for every supported target."""

    front: dict[int, RatioPair] = field(default_factory=dict)
    side: RatioPair | None = None


@dataclass(frozen=True, eq=False)
class ReferenceAxes:
    """Directions that disambiguate the sideways step.

    front: fallback direction toward the hips, used when the right hip was
    not observed (when it was, the shoulder-midpoint-to-hip direction is
    used instead).  side: the lateral direction pointing away from the
    body's midline on the scanned side.
    """

    front: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    side: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "front", _opt_vec3(self.front, "front axis"))
        object.__setattr__(self, "side", _opt_vec3(self.side, "side axis"))


def perpendicular_planar_direction(start, end, reference) -> np.ndarray:
    """Unit vector perpendicular to the start-end segment and parallel to XY.

    Of the two such directions, returns the one with a positive dot
    product against `reference`.
    """
    seg = np.asarray(end, dtype=float) - np.asarray(start, dtype=float)
    length = np.linalg.norm(seg)
    if length < 1e-9:
        raise DegenerateAxisError("keypoint segment has zero length")
    t1 = seg / length
    planar = np.array([t1[1], -t1[0], 0.0])  # cross(t1, z)
    norm = np.linalg.norm(planar)
    if norm < _VERTICAL_TOL_RAD:
        raise DegenerateAxisError("keypoint segment is vertical; no planar perpendicular")
    t2 = planar / norm
    sign = float(np.dot(t2, np.asarray(reference, dtype=float)))
    if abs(sign) < _SIGN_TOL:
        raise AmbiguousSignError(
            "reference direction is perpendicular to the candidate axis; cannot pick a side"
        )
    return t2 if sign > 0 else -t2


def front_target(start, end, segment_ratio: float, offset_ratio: float, reference) -> np.ndarray:
    """Target hanging off the shoulder segment: anchor plus sideways step.

    The sideways step is offset_ratio times the full segment length, along
    the planar perpendicular selected by `reference`.
    """
    start = np.asarray(start, dtype=float)
    seg = np.asarray(end, dtype=float) - start
    t2 = perpendicular_planar_direction(start, start + seg, reference)
    anchor = start + segment_ratio * seg
    return anchor + offset_ratio * np.linalg.norm(seg) * t2


def side_target(shoulder, hip, segment_ratio: float, offset_ratio: float, reference) -> np.ndarray:
    """Lateral target off the shoulder-hip segment.

    Unlike the front model, the sideways step scales with the walked
    distance |segment_ratio| * segment length, so the prediction is
    nonlinear in segment_ratio.
    """
    shoulder = np.asarray(shoulder, dtype=float)
    seg = np.asarray(hip, dtype=float) - shoulder
    t2 = perpendicular_planar_direction(shoulder, shoulder + seg, reference)
    anchor = shoulder + segment_ratio * seg
    walked = np.linalg.norm(anchor - shoulder)
    return anchor + offset_ratio * walked * t2


def front_reference(keypoints: Keypoints3D, fallback) -> np.ndarray:
    """Per-scene sideways disambiguator for front targets.

    The true "toward the hips" direction when the right hip was seen;
    the configured fallback axis otherwise.
    """
    if keypoints.right_hip is not None:
        mid = 0.5 * (keypoints.left_shoulder + keypoints.right_shoulder)
        return keypoints.right_hip - mid
    return np.asarray(fallback, dtype=float)


# fitting ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FitSample:
    """One training example: keypoints plus the annotated target position."""

    keypoints: Keypoints3D
    target: np.ndarray
    scene_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "target", _opt_vec3(self.target, "target"))


@dataclass(frozen=True, eq=False)
class FitDataset:
    samples: list[FitSample]

    def __post_init__(self):
        if len(self.samples) < 1:
            raise InsufficientSamplesError("a fit dataset needs at least one sample")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    iterations: int = 2000
    seed: int = 0
    init: tuple[float, float] = (0.5, 0.5)


@dataclass(frozen=True, eq=False)
class FitResult:
    ratios: RatioPair
    mean_planar_residual: float


def _front_sample_geometry(sample: FitSample, fallback_reference):
    kps = sample.keypoints
    if kps.left_shoulder is None or kps.right_shoulder is None:
        raise MissingKeypointError(
            f"sample {sample.scene_id} lacks a shoulder; cannot fit front targets"
        )
    start = kps.left_shoulder
    seg = kps.right_shoulder - start
    ref = front_reference(kps, fallback_reference)
    t2 = perpendicular_planar_direction(start, kps.right_shoulder, ref)
    return start, seg, t2


def fit_front(data: FitDataset, fallback_reference=None) -> FitResult:
    """Closed-form least squares for the front-target ratios.

    Each sample contributes its two planar equations
    (target - start)_xy = a * seg_xy + b * |seg| * t2_xy; the stacked
    system is linear in (a, b).  A single clean sample already determines
    both ratios exactly.  The reported residual is the mean planar
    distance between predictions and annotations (not the squared loss
    being minimized).
    """
    if fallback_reference is None:
        fallback_reference = ReferenceAxes().front
    rows = np.empty((2 * len(data), 2))
    rhs = np.empty(2 * len(data))
    for i, sample in enumerate(data.samples):
        start, seg, t2 = _front_sample_geometry(sample, fallback_reference)
        rows[2 * i] = (seg[0], np.linalg.norm(seg) * t2[0])
        rows[2 * i + 1] = (seg[1], np.linalg.norm(seg) * t2[1])
        rhs[2 * i : 2 * i + 2] = (sample.target - start)[:2]
    solution, _, rank, _ = np.linalg.lstsq(rows, rhs, rcond=None)
    if rank < 2:
        raise RankDeficientError(
            "planar design rows are collinear; samples do not pin down both ratios"
        )
    ratios = RatioPair(float(solution[0]), float(solution[1]))
    residual = _front_mean_planar_distance(data, ratios, fallback_reference)
    return FitResult(ratios=ratios, mean_planar_residual=residual)


def _front_mean_planar_distance(data, ratios, fallback_reference) -> float:
    total = 0.0
    for sample in data.samples:
        start, seg, t2 = _front_sample_geometry(sample, fallback_reference)
        pred = start + ratios.segment_ratio * seg
        pred = pred + ratios.offset_ratio * np.linalg.norm(seg) * t2
        total += float(np.linalg.norm((pred - sample.target)[:2]))
    return total / len(data)


def _side_sample_arrays(data: FitDataset, reference):
    shoulders = np.empty((len(data), 2))
    segs = np.empty((len(data), 2))
    lengths = np.empty(len(data))
    perps = np.empty((len(data), 2))
    gts = np.empty((len(data), 2))
    for i, sample in enumerate(data.samples):
        kps = sample.keypoints
        if kps.right_shoulder is None or kps.right_hip is None:
            raise MissingKeypointError(
                f"sample {sample.scene_id} lacks the right shoulder or hip"
            )
        seg = kps.right_hip - kps.right_shoulder
        t2 = perpendicular_planar_direction(kps.right_shoulder, kps.right_hip, reference)
        shoulders[i] = kps.right_shoulder[:2]
        segs[i] = seg[:2]
        lengths[i] = np.linalg.norm(seg)
        perps[i] = t2[:2]
        gts[i] = sample.target[:2]
    return shoulders, segs, lengths, perps, gts


def side_objective(theta, arrays) -> tuple[float, np.ndarray]:
    """Mean squared planar error of the lateral model, with its gradient.

    theta = (segment_ratio, offset_ratio).  The |segment_ratio| factor uses
    sign(segment_ratio) as its derivative (0 at exactly 0).
    """
    shoulders, segs, lengths, perps, gts = arrays
    a, b = float(theta[0]), float(theta[1])
    walked = np.abs(a) * lengths
    pred = shoulders + a * segs + (b * walked)[:, None] * perps
    diff = pred - gts
    loss = float(np.mean(np.einsum("ij,ij->i", diff, diff)))
    dpred_da = segs + (b * np.sign(a) * lengths)[:, None] * perps
    dpred_db = walked[:, None] * perps
    grad = np.array(
        [
            2.0 * np.mean(np.einsum("ij,ij->i", diff, dpred_da)),
            2.0 * np.mean(np.einsum("ij,ij->i", diff, dpred_db)),
        ]
    )
    return loss, grad


def fit_side(data: FitDataset, reference=None, sgd: SgdConfig = SgdConfig()) -> FitResult:
    """SGD fit of the lateral-target ratios.

    One sample per step, reshuffled each epoch from the seeded generator;
    the best parameters seen on the full objective are returned, so a late
    noisy step cannot degrade the answer.
    """
    if reference is None:
        reference = ReferenceAxes().side
    arrays = _side_sample_arrays(data, reference)
    shoulders, segs, lengths, perps, gts = arrays
    n = len(data)

    rng = np.random.default_rng(sgd.seed)
    theta = np.asarray(sgd.init, dtype=float).copy()
    best_theta = theta.copy()
    best_loss, _ = side_objective(theta, arrays)
    steps = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while steps < sgd.iterations:
            order = rng.permutation(n)
            for i in order:
                one = (
                    shoulders[i : i + 1],
                    segs[i : i + 1],
                    lengths[i : i + 1],
                    perps[i : i + 1],
                    gts[i : i + 1],
                )
                _, grad = side_objective(theta, one)
                theta = theta - sgd.learning_rate * grad
                if not np.all(np.isfinite(theta)):
                    raise NonFiniteError(
                        f"SGD diverged at step {steps} with lr={sgd.learning_rate}: "
                        f"params became {theta}"
                    )
                loss, _ = side_objective(theta, arrays)
                if not np.isfinite(loss):
                    raise NonFiniteError(
                        f"SGD loss overflowed at step {steps} with lr={sgd.learning_rate}: "
                        f"params {theta}"
                    )
                if loss < best_loss:
                    best_loss = loss
                    best_theta = theta.copy()
                steps += 1
                if steps >= sgd.iterations:
                    break

    ratios = RatioPair(float(best_theta[0]), float(best_theta[1]))
    pred = (
        shoulders
        + ratios.segment_ratio * segs
        + (ratios.offset_ratio * np.abs(ratios.segment_ratio) * lengths)[:, None] * perps
    )
    residual = float(np.mean(np.linalg.norm(pred - gts, axis=1)))
    return FitResult(ratios=ratios, mean_planar_residual=residual)


# orientation and full localization ------------------------------------------


def orientation_from_normal(normal, roll_reference) -> np.ndarray:
    """Angle-axis gripper rotation pointing the tool's +Z against the normal.

    The free roll is fixed by aligning the tool's +X with the projection of
    roll_reference onto the plane perpendicular to the normal.
    """
    n = np.asarray(normal, dtype=float)
    n_len = np.linalg.norm(n)
    if n_len < 1e-12:
        raise ZeroVectorError("surface normal has zero length")
    n = n / n_len
    ref = np.asarray(roll_reference, dtype=float)
    ref_len = np.linalg.norm(ref)
    if ref_len < 1e-12:
        raise ZeroVectorError("roll reference has zero length")
    proj = ref - np.dot(ref, n) * n
    if np.linalg.norm(proj) < ref_len * _VERTICAL_TOL_RAD:
        raise DegenerateRollError("roll reference is parallel to the surface normal")
    x_col = proj / np.linalg.norm(proj)
    z_col = -n
    y_col = np.cross(z_col, x_col)
    return rotation_to_angle_axis(np.column_stack([x_col, y_col, z_col]))


@dataclass(frozen=True, eq=False)
class ScanTargetPose:
    """A 6D gripper goal: position in meters, orientation as angle-axis."""

    target_id: int
    x: float
    y: float
    z: float
    rx: float
    ry: float
    rz: float
    far_from_surface: bool = False

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def rotation_vector(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz])

    @property
    def surface_normal(self) -> np.ndarray:
        """The outward surface normal this pose presses against (-R @ ez)."""
        from .geometry import angle_axis_to_rotation

        return -angle_axis_to_rotation(self.rotation_vector)[:, 2]

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "position_m": [self.x, self.y, self.z],
            "angle_axis": [self.rx, self.ry, self.rz],
            "far_from_surface": self.far_from_surface,
        }


@dataclass(frozen=True, eq=False)
class KeypointObservation:
    """Detected joint pixels per view; a joint missing from a dict was not seen."""

    views: tuple[dict, dict]

    def joint_in_view(self, joint: str, view_index: int, camera: PinholeCamera) -> Pixel | None:
        pixel = self.views[view_index].get(joint)
        if pixel is None:
            return None
        pixel = Pixel(float(pixel[0]), float(pixel[1]))
        if not camera.contains(pixel):
            return None
        return pixel

    def to_dict(self) -> dict:
        return {
            f"view{i}": {j: [float(p[0]), float(p[1])] for j, p in view.items()}
            for i, view in enumerate(self.views)
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointObservation":
        _check_keys(data, {"view0", "view1"}, "observation")
        views = []
        for key in ("view0", "view1"):
            view = {}
            for joint, uv in data.get(key, {}).items():
                if joint not in ALL_JOINTS:
                    raise ConfigError(f"unknown joint name {joint!r}")
                view[joint] = Pixel(float(uv[0]), float(uv[1]))
            views.append(view)
        return cls(views=(views[0], views[1]))


def required_joints(pose_kind: str) -> tuple[str, ...]:
    if pose_kind == "front":
        return (LEFT_SHOULDER, RIGHT_SHOULDER)
    if pose_kind == "side":
        return (RIGHT_SHOULDER, RIGHT_HIP)
    raise ValueError(f"pose_kind must be 'front' or 'side', got {pose_kind!r}")


def triangulate_joints(
    camera_a: PinholeCamera,
    camera_b: PinholeCamera,
    observation: KeypointObservation,
    joints=ALL_JOINTS,
) -> dict[str, np.ndarray]:
    """3D positions of every joint seen (in bounds) in both views."""
    out = {}
    for joint in joints:
        pix_a = observation.joint_in_view(joint, 0, camera_a)
        pix_b = observation.joint_in_view(joint, 1, camera_b)
        if pix_a is None or pix_b is None:
            continue
        out[joint] = triangulate(camera_a, camera_b, pix_a, pix_b)
    return out


def keypoints_from_observation(
    camera_a: PinholeCamera,
    camera_b: PinholeCamera,
    observation: KeypointObservation,
    pose_kind: str,
) -> Keypoints3D:
    """Triangulate the joints needed for pose_kind, failing on missing ones."""
    positions = triangulate_joints(camera_a, camera_b, observation)
    for joint in required_joints(pose_kind):
        if joint not in positions:
            raise MissingKeypointError(
                f"joint {joint!r} is not visible in both views; cannot localize {pose_kind} targets"
            )
    return Keypoints3D(
        left_shoulder=positions.get(LEFT_SHOULDER),
        right_shoulder=positions.get(RIGHT_SHOULDER),
        right_hip=positions.get(RIGHT_HIP),
    )


def regress_targets(
    keypoints: Keypoints3D,
    params: TargetModelParams,
    pose_kind: str,
    axes: ReferenceAxes | None = None,
) -> list[tuple[int, np.ndarray]]:
    """Raw model predictions (before surface snapping), ordered by target id."""
    axes = axes or ReferenceAxes()
    out = []
    if pose_kind == "front":
        if keypoints.left_shoulder is None or keypoints.right_shoulder is None:
            raise MissingKeypointError("front targets need both shoulders")
        if not params.front:
            raise ConfigError("no front-target ratios are configured")
        ref = front_reference(keypoints, axes.front)
        for target_id in sorted(params.front):
            pair = params.front[target_id]
            point = front_target(
                keypoints.left_shoulder,
                keypoints.right_shoulder,
                pair.segment_ratio,
                pair.offset_ratio,
                ref,
            )
            out.append((target_id, point))
    elif pose_kind == "side":
        if keypoints.right_shoulder is None or keypoints.right_hip is None:
            raise MissingKeypointError("the lateral target needs the right shoulder and hip")
        if params.side is None:
            raise ConfigError("no lateral-target ratios are configured")
        point = side_target(
            keypoints.right_shoulder,
            keypoints.right_hip,
            params.side.segment_ratio,
            params.side.offset_ratio,
            axes.side,
        )
        out.append((SIDE_TARGET_ID, point))
    else:
        raise ValueError(f"pose_kind must be 'front' or 'side', got {pose_kind!r}")
    return out


def roll_reference_direction(keypoints: Keypoints3D, pose_kind: str) -> np.ndarray:
    """Body-axis direction used to pin the probe's roll (the free rotation)."""
    if pose_kind == "front":
        return keypoints.right_shoulder - keypoints.left_shoulder
    return keypoints.right_hip - keypoints.right_shoulder


def localize(
    camera_a: PinholeCamera,
    camera_b: PinholeCamera,
    observation: KeypointObservation,
    cloud: FusedCloud,
    params: TargetModelParams,
    pose_kind: str,
    axes: ReferenceAxes | None = None,
) -> list[ScanTargetPose]:
    """Full pipeline: triangulate joints, regress targets, snap to the surface.

    Each returned pose presses the tool's +Z against the local surface
    normal at the regressed target.  Targets whose planar snap distance is
    suspiciously large are flagged (and logged), not dropped.
    """
    keypoints = keypoints_from_observation(camera_a, camera_b, observation, pose_kind)
    roll_ref = roll_reference_direction(keypoints, pose_kind)
    poses = []
    for target_id, point in regress_targets(keypoints, params, pose_kind, axes):
        adjusted = adjust_target(cloud, point)
        if adjusted.far_from_surface:
            log.warning(
                "target %d regressed %.1f mm away from the scanned surface",
                target_id,
                1000 * adjusted.planar_distance,
            )
        rotvec = orientation_from_normal(adjusted.normal, roll_ref)
        poses.append(
            ScanTargetPose(
                target_id=target_id,
                x=float(adjusted.position[0]),
                y=float(adjusted.position[1]),
                z=float(adjusted.position[2]),
                rx=float(rotvec[0]),
                ry=float(rotvec[1]),
                rz=float(rotvec[2]),
                far_from_surface=adjusted.far_from_surface,
            )
        )
    return poses


# params file -----------------------------------------------------------------


def params_to_dict(params: TargetModelParams, axes: ReferenceAxes) -> dict:
    data: dict = {
        "front": {
            str(tid): {
                "r_f1": pair.segment_ratio,
                "r_f2": pair.offset_ratio,
            }
            for tid, pair in sorted(params.front.items())
        },
        "reference_axes": {
            "front": [float(x) for x in axes.front],
            "side": [float(x) for x in axes.side],
        },
    }
    if params.side is not None:
        data["side"] = {"r_s1": params.side.segment_ratio, "r_s2": params.side.offset_ratio}
    return data


def params_from_dict(data: dict) -> tuple[TargetModelParams, ReferenceAxes]:
    _check_keys(data, {"front", "side", "reference_axes"}, "params")
    front = {}
    for tid, entry in data.get("front", {}).items():
        _check_keys(entry, {"r_f1", "r_f2"}, f"front target {tid}")
        front[int(tid)] = RatioPair(float(entry["r_f1"]), float(entry["r_f2"]))
    side = None
    if "side" in data:
        _check_keys(data["side"], {"r_s1", "r_s2"}, "side target")
        side = RatioPair(float(data["side"]["r_s1"]), float(data["side"]["r_s2"]))
    axes = ReferenceAxes()
    if "reference_axes" in data:
        _check_keys(data["reference_axes"], {"front", "side"}, "reference_axes")
        axes = ReferenceAxes(
            front=np.asarray(data["reference_axes"].get("front", axes.front), dtype=float),
            side=np.asarray(data["reference_axes"].get("side", axes.side), dtype=float),
        )
    return TargetModelParams(front=front, side=side), axes


def save_params(path, params: TargetModelParams, axes: ReferenceAxes) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params, axes), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path) -> tuple[TargetModelParams, ReferenceAxes]:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
