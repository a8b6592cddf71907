"""Synthetic torso scenes with exact ground truth.

The subject is an elliptic-cylinder dome: z(x) = h + c*sqrt(1 - (x/a)^2)
for |x| <= a, extruded along Y over [0, length], lying in the base frame
with the head toward -Y.  Everything about it (heights, normals, ray
intersections) has a closed form, so scenes double as oracles: depth maps
are ray-cast analytically, keypoints sit exactly on the surface, and scan
targets are generated from known ratio parameters and then dropped
vertically onto the surface.

Noise is applied last and is fully determined by the noise seed: Gaussian
pixel noise on observed keypoints and target pixels, Gaussian depth noise
on valid depth pixels, and per-joint faults that either drop a joint from
both views or displace it by 50 px (a plausible wrong detection).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import DepthMap, read_pfm, write_pfm
from .errors import (
    CameraMissesTorsoError,
    ConfigError,
    InvalidRangeError,
)
from .geometry import (
    MIN_DEPTH,
    PinholeCamera,
    Pixel,
    RigidTransform,
    _check_keys,
)
from .targets import (
    ALL_JOINTS,
    FRONT_TARGET_IDS,
    SIDE_TARGET_ID,
    KeypointObservation,
    Keypoints3D,
    ReferenceAxes,
    TargetModelParams,
    front_target,
    params_from_dict,
    params_to_dict,
    side_target,
)

DISPLACEMENT_PX = 50.0
# fraction of torso surface samples that must project into both views
MIN_VISIBLE_FRACTION = 0.9

_TORSO_FIELDS = (
    "half_width",
    "thickness",
    "length",
    "shoulder_span",
    "shoulder_offset",
    "hip_offset",
    "base_height",
)


@dataclass(frozen=True)
class TorsoSpec:
    """Parametric torso dimensions in meters."""

    half_width: float = 0.17
    thickness: float = 0.105
    length: float = 0.55
    shoulder_span: float = 0.27
    shoulder_offset: float = 0.10
    hip_offset: float = 0.45
    base_height: float = 0.05

    def __post_init__(self):
        for name in ("half_width", "thickness", "length", "shoulder_span"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"torso {name} must be positive")
        if self.shoulder_span >= 2 * self.half_width:
            raise ConfigError("shoulder span must be narrower than the torso")
        if not 0 <= self.shoulder_offset < self.hip_offset <= self.length:
            raise ConfigError("need 0 <= shoulder_offset < hip_offset <= length")

    def surface_height(self, x, y):
        """Surface z over planar points; NaN where the torso is absent."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        arg = 1.0 - (x / self.half_width) ** 2
        z = self.base_height + self.thickness * np.sqrt(np.maximum(arg, 0.0))
        inside = (np.abs(x) <= self.half_width) & (y >= 0) & (y <= self.length)
        return np.where(inside, z, np.nan)

    def surface_normal(self, x, y):
        """Outward (upward) unit normal at planar points on the dome."""
        x = np.asarray(x, dtype=float)
        z = self.surface_height(x, y)
        rel = np.asarray(z, dtype=float) - self.base_height
        n = np.stack(
            [
                2 * x / self.half_width**2,
                np.zeros_like(x),
                2 * rel / self.thickness**2,
            ],
            axis=-1,
        )
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {name: float(getattr(self, name)) for name in _TORSO_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "TorsoSpec":
        _check_keys(data, set(_TORSO_FIELDS), "torso")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class NoiseSpec:
    """Observation-noise settings; zero everywhere by default."""

    keypoint_sigma_px: float = 0.0
    depth_sigma_m: float = 0.0
    fault_prob: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.keypoint_sigma_px < 0 or self.depth_sigma_m < 0:
            raise ConfigError("noise sigmas must be nonnegative")
        for joint, prob in self.fault_prob.items():
            if joint not in ALL_JOINTS:
                raise ConfigError(f"unknown joint {joint!r} in fault probabilities")
            if not 0 <= prob <= 1:
                raise ConfigError(f"fault probability for {joint} must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "keypoint_sigma_px": self.keypoint_sigma_px,
            "depth_sigma_m": self.depth_sigma_m,
            "fault_prob": {j: float(p) for j, p in sorted(self.fault_prob.items())},
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSpec":
        _check_keys(
            data, {"keypoint_sigma_px", "depth_sigma_m", "fault_prob", "seed"}, "noise"
        )
        return cls(
            keypoint_sigma_px=float(data.get("keypoint_sigma_px", 0.0)),
            depth_sigma_m=float(data.get("depth_sigma_m", 0.0)),
            fault_prob=dict(data.get("fault_prob", {})),
            seed=int(data.get("seed", 0)),
        )


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """One fully specified two-view capture with ground truth attached."""

    scene_id: int
    pose_kind: str
    torso: TorsoSpec
    noise: NoiseSpec
    ratios: TargetModelParams
    axes: ReferenceAxes
    cameras: tuple[PinholeCamera, PinholeCamera]
    depths: tuple[DepthMap, DepthMap]
    observation: KeypointObservation
    keypoints_true: Keypoints3D
    keypoint_pixels_true: tuple[dict, dict]
    targets_true: dict[int, np.ndarray]
    target_normals_true: dict[int, np.ndarray]
    target_pixels_true: tuple[dict, dict]
    target_pixels_observed: tuple[dict, dict]
    faulted_joints: dict[str, str]

    @property
    def target_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.targets_true))


def default_cameras(torso: TorsoSpec, baseline=0.3, height=1.0, fx=600.0,
                    width=640, height_px=480) -> tuple[PinholeCamera, PinholeCamera]:
    """Two converging cameras above the torso, a narrow baseline apart."""
    center = np.array([0.0, torso.length / 2, torso.base_height])
    cam_z = torso.base_height + height
    cams = []
    for side in (-1.0, 1.0):
        position = np.array([side * baseline / 2, torso.length / 2, cam_z])
        cams.append(
            _look_at_camera(position, center, fx=fx, width=width, height=height_px)
        )
    return (cams[0], cams[1])


def _look_at_camera(position, target, fx, width, height) -> PinholeCamera:
    forward = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    forward = forward / np.linalg.norm(forward)
    down_ref = np.array([0.0, 1.0, 0.0])  # image "down" follows world +Y
    y_cam = down_ref - np.dot(down_ref, forward) * forward
    norm = np.linalg.norm(y_cam)
    if norm < 1e-9:
        raise ConfigError("camera viewing direction is parallel to the +Y roll reference")
    y_cam = y_cam / norm
    x_cam = np.cross(y_cam, forward)
    pose = RigidTransform(np.column_stack([x_cam, y_cam, forward]), np.asarray(position))
    return PinholeCamera(fx, fx, width / 2, height / 2, width, height, pose)


def raycast_depth(camera: PinholeCamera, torso: TorsoSpec) -> DepthMap:
    """Analytic per-pixel depth of the torso dome; misses are 0.

    Intersects every pixel ray with the elliptic cylinder
    (x/a)^2 + ((z-h)/c)^2 = 1 in closed form and keeps the nearest hit on
    the upper sheet within the torso's Y extent.  Depth is the camera-frame
    Z of the hit (the pixel-ray parameter), matching deprojection.
    """
    us, vs = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    uv = np.column_stack([us.ravel(), vs.ravel()]).astype(float)
    origin, dirs = camera.pixel_rays(uv)

    a, c, h = torso.half_width, torso.thickness, torso.base_height
    qa = (dirs[:, 0] / a) ** 2 + (dirs[:, 2] / c) ** 2
    qb = 2 * (origin[0] * dirs[:, 0] / a**2 + (origin[2] - h) * dirs[:, 2] / c**2)
    qc = (origin[0] / a) ** 2 + ((origin[2] - h) / c) ** 2 - 1.0

    disc = qb**2 - 4 * qa * qc
    hit = (disc >= 0) & (qa > 1e-18)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    denom = np.where(hit, 2 * qa, 1.0)
    roots = np.stack([(-qb - sq) / denom, (-qb + sq) / denom], axis=1)

    t_best = np.full(len(uv), np.inf)
    for k in (0, 1):
        t = roots[:, k]
        y = origin[1] + t * dirs[:, 1]
        z = origin[2] + t * dirs[:, 2]
        ok = hit & (t > MIN_DEPTH) & (z >= h - 1e-12) & (y >= 0) & (y <= torso.length)
        t_best = np.where(ok & (t < t_best), t, t_best)

    depth = np.where(np.isfinite(t_best), t_best, 0.0)
    return DepthMap(values=depth.reshape(camera.height, camera.width))


def _project_visible(camera: PinholeCamera, points: np.ndarray):
    """Pixels for world points, with an in-front-and-in-bounds mask."""
    local = camera.pose.inverse().apply(points)
    z = local[:, 2]
    front = z > MIN_DEPTH
    safe_z = np.where(front, z, 1.0)
    u = camera.fx * local[:, 0] / safe_z + camera.cx
    v = camera.fy * local[:, 1] / safe_z + camera.cy
    inside = front & (u >= 0) & (u <= camera.width - 1) & (v >= 0) & (v <= camera.height - 1)
    return np.column_stack([u, v]), inside


def _check_visibility(cameras, torso: TorsoSpec) -> None:
    xs = np.linspace(-torso.half_width, torso.half_width, 21)
    ys = np.linspace(0.0, torso.length, 21)
    gx, gy = np.meshgrid(xs, ys)
    gz = torso.surface_height(gx, gy)
    samples = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    for index, camera in enumerate(cameras):
        _, inside = _project_visible(camera, samples)
        fraction = float(np.mean(inside))
        if fraction < MIN_VISIBLE_FRACTION:
            raise CameraMissesTorsoError(
                f"camera {index} sees only {fraction:.0%} of the torso surface"
            )


def _surface_point(torso: TorsoSpec, point: np.ndarray, label: str) -> np.ndarray:
    z = float(torso.surface_height(point[0], point[1]))
    if not np.isfinite(z):
        raise ConfigError(
            f"{label} at planar ({point[0]:.3f}, {point[1]:.3f}) falls off the torso surface"
        )
    return np.array([point[0], point[1], z])


def true_keypoints(torso: TorsoSpec) -> Keypoints3D:
    """Joints on the torso surface: shoulders astride the midline, right hip."""
    half_span = torso.shoulder_span / 2
    hip_x = 0.8 * half_span
    ls = _surface_point(torso, np.array([-half_span, torso.shoulder_offset]), "left shoulder")
    rs = _surface_point(torso, np.array([half_span, torso.shoulder_offset]), "right shoulder")
    hip = _surface_point(torso, np.array([hip_x, torso.hip_offset]), "right hip")
    return Keypoints3D(left_shoulder=ls, right_shoulder=rs, right_hip=hip)


def true_targets(torso: TorsoSpec, ratios: TargetModelParams, pose_kind: str,
                 axes: ReferenceAxes) -> tuple[dict, dict]:
    """Ground-truth targets (on the surface) and their analytic normals."""
    kps = true_keypoints(torso)
    targets, normals = {}, {}
    if pose_kind == "front":
        if set(ratios.front) < set(FRONT_TARGET_IDS):
            raise ConfigError("front scenes need generative ratios for targets 1 and 2")
        mid = 0.5 * (kps.left_shoulder + kps.right_shoulder)
        reference = kps.right_hip - mid
        for tid in FRONT_TARGET_IDS:
            pair = ratios.front[tid]
            raw = front_target(
                kps.left_shoulder, kps.right_shoulder,
                pair.segment_ratio, pair.offset_ratio, reference,
            )
            targets[tid] = _surface_point(torso, raw, f"target {tid}")
    elif pose_kind == "side":
        if ratios.side is None:
            raise ConfigError("side scenes need generative side ratios")
        raw = side_target(
            kps.right_shoulder, kps.right_hip,
            ratios.side.segment_ratio, ratios.side.offset_ratio, axes.side,
        )
        targets[SIDE_TARGET_ID] = _surface_point(torso, raw, "side target")
    else:
        raise ValueError(f"pose_kind must be 'front' or 'side', got {pose_kind!r}")
    for tid, point in targets.items():
        normals[tid] = np.asarray(torso.surface_normal(point[0], point[1]), dtype=float)
    return targets, normals


def _exact_pixels(cameras, named_points: dict, what: str) -> tuple[dict, dict]:
    views = ({}, {})
    names = list(named_points)
    points = np.array([named_points[n] for n in names])
    for vi, camera in enumerate(cameras):
        uv, inside = _project_visible(camera, points)
        for name, px, ok in zip(names, uv, inside):
            if not ok:
                raise CameraMissesTorsoError(
                    f"{what} {name} projects outside camera {vi}"
                )
            views[vi][name] = Pixel(float(px[0]), float(px[1]))
    return views


def generate_scene(torso: TorsoSpec, ratios: TargetModelParams,
                   cameras: tuple | None, noise: NoiseSpec, pose_kind: str,
                   scene_id: int = 0,
                   axes: ReferenceAxes | None = None) -> SyntheticScene:
    """Build one scene: exact geometry first, then noise on top of it."""
    axes = axes or ReferenceAxes()
    if cameras is None:
        cameras = default_cameras(torso)
    cameras = tuple(cameras)
    _check_visibility(cameras, torso)

    kps = true_keypoints(torso)
    targets, normals = true_targets(torso, ratios, pose_kind, axes)
    kp_points = {j: getattr(kps, j) for j in ALL_JOINTS}
    kp_pixels_true = _exact_pixels(cameras, kp_points, "keypoint")
    target_pixels_true = _exact_pixels(cameras, targets, "target")
    clean_depths = tuple(raycast_depth(camera, torso) for camera in cameras)

    # independent noise streams so adding one consumer never shifts another
    streams = np.random.SeedSequence(noise.seed).spawn(5)
    kp_rng, fault_rng, target_rng = (np.random.default_rng(s) for s in streams[:3])
    depth_rngs = [np.random.default_rng(s) for s in streams[3:]]

    observed = ({}, {})
    for joint in ALL_JOINTS:
        for vi in (0, 1):
            px = kp_pixels_true[vi][joint]
            du, dv = noise.keypoint_sigma_px * kp_rng.standard_normal(2)
            observed[vi][joint] = Pixel(px.u + du, px.v + dv)

    faulted = {}
    for joint in ALL_JOINTS:
        prob = noise.fault_prob.get(joint, 0.0)
        if prob > 0 and fault_rng.uniform() < prob:
            if fault_rng.uniform() < 0.5:
                faulted[joint] = "dropped"
                for vi in (0, 1):
                    del observed[vi][joint]
            else:
                faulted[joint] = "displaced"
                for vi in (0, 1):
                    angle = fault_rng.uniform(0, 2 * np.pi)
                    px = observed[vi][joint]
                    observed[vi][joint] = Pixel(
                        px.u + DISPLACEMENT_PX * np.cos(angle),
                        px.v + DISPLACEMENT_PX * np.sin(angle),
                    )

    target_observed = ({}, {})
    for tid in sorted(targets):
        for vi in (0, 1):
            px = target_pixels_true[vi][tid]
            du, dv = noise.keypoint_sigma_px * target_rng.standard_normal(2)
            target_observed[vi][tid] = Pixel(px.u + du, px.v + dv)

    depths = []
    for depth, rng in zip(clean_depths, depth_rngs):
        if noise.depth_sigma_m > 0:
            values = depth.values.copy()
            mask = depth.valid_mask
            values[mask] += noise.depth_sigma_m * rng.standard_normal(int(mask.sum()))
            depths.append(DepthMap(values=values))
        else:
            depths.append(depth)

    return SyntheticScene(
        scene_id=scene_id,
        pose_kind=pose_kind,
        torso=torso,
        noise=noise,
        ratios=ratios,
        axes=axes,
        cameras=cameras,
        depths=tuple(depths),
        observation=KeypointObservation(views=observed),
        keypoints_true=kps,
        keypoint_pixels_true=kp_pixels_true,
        targets_true=targets,
        target_normals_true=normals,
        target_pixels_true=target_pixels_true,
        target_pixels_observed=target_observed,
        faulted_joints=faulted,
    )


DEFAULT_TORSO_RANGES = {
    "half_width": (0.165, 0.20),
    "thickness": (0.09, 0.12),
    "length": (0.50, 0.60),
    "shoulder_span": (0.24, 0.27),
    "shoulder_offset": (0.08, 0.12),
    "hip_offset": (0.42, 0.50),
    "base_height": (0.05, 0.05),
}


def default_ratios() -> TargetModelParams:
    from .targets import RatioPair

    return TargetModelParams(
        front={1: RatioPair(0.75, 0.20), 2: RatioPair(0.75, 0.50)},
        side=RatioPair(0.40, 0.15),
    )


def _scene_seed_sequence(master_seed: int, index: int) -> np.random.SeedSequence:
    """The i-th child stream; reproducible per index for parallel generation."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))


def sample_torso(ranges: dict, rng) -> TorsoSpec:
    values = {}
    for name in _TORSO_FIELDS:  # fixed draw order keeps cohorts reproducible
        lo, hi = ranges[name]
        values[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return TorsoSpec(**values)


def _validate_ranges(ranges: dict) -> dict:
    _check_keys(ranges, set(_TORSO_FIELDS), "torso ranges")
    full = dict(DEFAULT_TORSO_RANGES)
    for name, bounds in ranges.items():
        lo, hi = (bounds, bounds) if np.isscalar(bounds) else (bounds[0], bounds[1])
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise InvalidRangeError(f"invalid interval for {name}: [{lo}, {hi}]")
        full[name] = (float(lo), float(hi))
    return full


def generate_cohort_scene(index: int, master_seed: int, ranges: dict,
                          ratios: TargetModelParams, noise: NoiseSpec,
                          pose_kind: str, cameras=None,
                          axes: ReferenceAxes | None = None) -> SyntheticScene:
    """One cohort member, depending only on (master_seed, index)."""
    rng = np.random.default_rng(_scene_seed_sequence(master_seed, index))
    torso = sample_torso(ranges, rng)
    scene_noise = replace(noise, seed=int(rng.integers(2**63)))
    return generate_scene(
        torso, ratios, cameras, scene_noise, pose_kind, scene_id=index, axes=axes
    )


def generate_cohort(n: int, ranges: dict | None = None,
                    ratios: TargetModelParams | None = None,
                    noise: NoiseSpec = NoiseSpec(), pose_kind: str = "front",
                    seed: int = 0, cameras=None,
                    axes: ReferenceAxes | None = None) -> list[SyntheticScene]:
    """n scenes with torso dimensions drawn per-field from uniform intervals.

    The generative ratios are shared across the cohort; only anatomy (and
    noise) varies.  Scene i is a pure function of (seed, i), so parallel
    and sequential generation agree.
    """
    if n < 1:
        raise InvalidRangeError(f"cohort size must be >= 1, got {n}")
    full_ranges = _validate_ranges(ranges or {})
    ratios = ratios if ratios is not None else default_ratios()
    return [
        generate_cohort_scene(i, seed, full_ranges, ratios, noise, pose_kind,
                              cameras=cameras, axes=axes)
        for i in range(n)
    ]


# scene files -----------------------------------------------------------------


def _pixels_to_json(views: tuple[dict, dict]) -> list:
    return [
        {str(k): [float(p[0]), float(p[1])] for k, p in sorted(view.items(), key=lambda kv: str(kv[0]))}
        for view in views
    ]


def _pixels_from_json(data: list, int_keys: bool) -> tuple[dict, dict]:
    out = []
    for view in data:
        parsed = {}
        for key, uv in view.items():
            parsed[int(key) if int_keys else key] = Pixel(float(uv[0]), float(uv[1]))
        out.append(parsed)
    return (out[0], out[1])


_SCENE_KEYS = {
    "scene_id", "pose_kind", "torso", "noise", "ratios", "cameras", "depth_files",
    "observation", "keypoints_true", "keypoint_pixels_true", "targets_true",
    "target_normals_true", "target_pixels_true", "target_pixels_observed",
    "faulted_joints",
}


def save_scene(scene: SyntheticScene, directory) -> None:
    """Write scene.json plus one PFM depth map per view into `directory`."""
    os.makedirs(directory, exist_ok=True)
    depth_files = []
    for vi, depth in enumerate(scene.depths):
        name = f"depth_{vi}.pfm"
        write_pfm(os.path.join(directory, name), depth.values)
        depth_files.append(name)
    data = {
        "scene_id": scene.scene_id,
        "pose_kind": scene.pose_kind,
        "torso": scene.torso.to_dict(),
        "noise": scene.noise.to_dict(),
        "ratios": params_to_dict(scene.ratios, scene.axes),
        "cameras": [camera.to_dict() for camera in scene.cameras],
        "depth_files": depth_files,
        "observation": scene.observation.to_dict(),
        "keypoints_true": {
            j: [float(x) for x in getattr(scene.keypoints_true, j)] for j in ALL_JOINTS
        },
        "keypoint_pixels_true": _pixels_to_json(scene.keypoint_pixels_true),
        "targets_true": {str(t): [float(x) for x in p] for t, p in sorted(scene.targets_true.items())},
        "target_normals_true": {
            str(t): [float(x) for x in n] for t, n in sorted(scene.target_normals_true.items())
        },
        "target_pixels_true": _pixels_to_json(scene.target_pixels_true),
        "target_pixels_observed": _pixels_to_json(scene.target_pixels_observed),
        "faulted_joints": dict(sorted(scene.faulted_joints.items())),
    }
    with open(os.path.join(directory, "scene.json"), "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene(directory) -> SyntheticScene:
    with open(os.path.join(directory, "scene.json")) as fh:
        data = json.load(fh)
    _check_keys(data, _SCENE_KEYS, "scene")
    ratios, axes = params_from_dict(data["ratios"])
    depths = tuple(
        DepthMap(values=read_pfm(os.path.join(directory, name)))
        for name in data["depth_files"]
    )
    return SyntheticScene(
        scene_id=int(data["scene_id"]),
        pose_kind=data["pose_kind"],
        torso=TorsoSpec.from_dict(data["torso"]),
        noise=NoiseSpec.from_dict(data["noise"]),
        ratios=ratios,
        axes=axes,
        cameras=tuple(PinholeCamera.from_dict(c) for c in data["cameras"]),
        depths=depths,
        observation=KeypointObservation.from_dict(data["observation"]),
        keypoints_true=Keypoints3D(
            **{j: np.asarray(v, dtype=float) for j, v in data["keypoints_true"].items()}
        ),
        keypoint_pixels_true=_pixels_from_json(data["keypoint_pixels_true"], int_keys=False),
        targets_true={int(t): np.asarray(p, dtype=float) for t, p in data["targets_true"].items()},
        target_normals_true={
            int(t): np.asarray(nv, dtype=float) for t, nv in data["target_normals_true"].items()
        },
        target_pixels_true=_pixels_from_json(data["target_pixels_true"], int_keys=True),
        target_pixels_observed=_pixels_from_json(data["target_pixels_observed"], int_keys=True),
        faulted_joints=dict(data["faulted_joints"]),
    )


def save_cohort(scenes, directory) -> None:
    for scene in scenes:
        save_scene(scene, os.path.join(directory, f"scene_{scene.scene_id:03d}"))


def load_cohort(directory) -> list[SyntheticScene]:
    names = sorted(
        d for d in os.listdir(directory)
        if d.startswith("scene_") and os.path.isdir(os.path.join(directory, d))
    )
    if not names:
        raise ConfigError(f"no scene_* directories under {directory}")
    return [load_scene(os.path.join(directory, name)) for name in names]
