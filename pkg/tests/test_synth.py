"""Synthetic scene generator: analytic surface, raycasting, noise, cohorts."""

import filecmp

import numpy as np
import pytest

from scanloc.cloud import fuse
from scanloc.errors import (
    CameraMissesTorsoError,
    ConfigError,
    InvalidRangeError,
)
from scanloc.geometry import angle_between_degrees
from scanloc.synth import (
    NoiseSpec,
    TorsoSpec,
    default_cameras,
    default_ratios,
    generate_cohort,
    generate_cohort_scene,
    generate_scene,
    load_cohort,
    load_scene,
    raycast_depth,
    save_cohort,
    save_scene,
)
from scanloc.targets import (
    FitDataset,
    FitSample,
    Keypoints3D,
    fit_front,
    fit_side,
    localize,
    triangulate_joints,
)

from helpers import pixel_ray_grid

TORSO = TorsoSpec()
RATIOS = default_ratios()


def oracle_ray_depths(camera, torso, pixel_indices):
    """Per-pixel surface intersection via polynomial root-finding.

    Builds the quadratic by polynomial multiplication and solves it with
    np.roots (an eigenvalue method), sharing no arithmetic with the
    library's closed-form solve.
    """
    origins, dirs = pixel_ray_grid(camera)
    a, c, h = torso.half_width, torso.thickness, torso.base_height
    out = np.zeros(len(pixel_indices))
    for row, flat in enumerate(pixel_indices):
        d = dirs.reshape(-1, 3)[flat]
        px = np.array([d[0], origins[0]])
        pz = np.array([d[2], origins[2] - h])
        poly = np.polymul(px, px) / a**2 + np.polymul(pz, pz) / c**2 - np.array([0, 0, 1.0])
        best = np.inf
        for root in np.roots(poly):
            if abs(root.imag) > 1e-9:
                continue
            t = root.real
            z = origins[2] + t * d[2]
            y = origins[1] + t * d[1]
            if t > 1e-9 and z >= h - 1e-12 and 0 <= y <= torso.length:
                best = min(best, t)
        out[row] = 0.0 if np.isinf(best) else best
    return out


class TestTorsoSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TorsoSpec(half_width=-0.1)
        with pytest.raises(ConfigError):
            TorsoSpec(shoulder_span=0.4, half_width=0.17)  # wider than the torso
        with pytest.raises(ConfigError):
            TorsoSpec(shoulder_offset=0.5, hip_offset=0.4)
        with pytest.raises(ConfigError):
            TorsoSpec(hip_offset=0.7, length=0.55)

    def test_surface_height_profile(self):
        t = TORSO
        assert t.surface_height(0.0, 0.2) == pytest.approx(t.base_height + t.thickness)
        assert t.surface_height(t.half_width, 0.2) == pytest.approx(t.base_height)
        assert np.isnan(t.surface_height(t.half_width + 0.01, 0.2))
        assert np.isnan(t.surface_height(0.0, -0.01))
        assert np.isnan(t.surface_height(0.0, t.length + 0.01))

    def test_surface_normals_match_finite_differences(self):
        rng = np.random.default_rng(18)
        xs = rng.uniform(-0.9 * TORSO.half_width, 0.9 * TORSO.half_width, 50)
        ys = rng.uniform(0.05, TORSO.length - 0.05, 50)
        h = 1e-6
        for x, y in zip(xs, ys):
            n = TORSO.surface_normal(x, y)
            slope = (TORSO.surface_height(x + h, y) - TORSO.surface_height(x - h, y)) / (2 * h)
            tangent = np.array([1.0, 0.0, slope])
            assert abs(np.linalg.norm(n) - 1) < 1e-12
            assert n[1] == 0.0
            assert n[2] > 0
            assert abs(np.dot(n, tangent)) < 1e-6
            assert abs(np.dot(n, [0.0, 1.0, 0.0])) == 0.0


class TestRaycast:
    def test_matches_root_finding_oracle(self):
        cam = default_cameras(TORSO)[0]
        depth = raycast_depth(cam, TORSO)
        rng = np.random.default_rng(77)
        flat = rng.choice(cam.width * cam.height, size=400, replace=False)
        want = oracle_ray_depths(cam, TORSO, flat)
        got = depth.values.ravel()[flat]
        assert np.allclose(got, want, atol=1e-9)
        assert (want > 0).sum() > 50  # the sample covers hits
        assert (want == 0).sum() > 50  # and misses

    def test_deprojected_hits_lie_on_surface(self):
        # depth is camera-frame Z: deprojecting (pixel, depth) must land on
        # the analytic surface, inside the torso's Y extent
        from scanloc.geometry import Pixel

        cam = default_cameras(TORSO)[1]
        depth = raycast_depth(cam, TORSO)
        vidx = np.flatnonzero(depth.values.ravel() > 0)
        rng = np.random.default_rng(78)
        for flat in rng.choice(vidx, size=300, replace=False):
            v, u = divmod(int(flat), cam.width)
            point = cam.deproject(Pixel(float(u), float(v)), depth.values[v, u])
            f = (point[0] / TORSO.half_width) ** 2 + (
                (point[2] - TORSO.base_height) / TORSO.thickness
            ) ** 2
            assert abs(f - 1.0) < 1e-9
            assert -1e-9 <= point[1] <= TORSO.length + 1e-9
            assert point[2] >= TORSO.base_height - 1e-9

    def test_misses_are_zero_outside_footprint(self):
        cam = default_cameras(TORSO)[0]
        depth = raycast_depth(cam, TORSO)
        assert depth.values[0, 0] == 0.0  # image corner looks past the torso
        assert depth.valid_mask.sum() > 10000


class TestGenerateScene:
    def test_true_pixels_reproject_exactly(self):
        scene = generate_scene(TORSO, RATIOS, None, NoiseSpec(), "front")
        for vi, cam in enumerate(scene.cameras):
            for joint, px in scene.keypoint_pixels_true[vi].items():
                want = cam.project(getattr(scene.keypoints_true, joint))
                assert abs(px.u - want.u) < 1e-9
                assert abs(px.v - want.v) < 1e-9
            for tid, px in scene.target_pixels_true[vi].items():
                want = cam.project(scene.targets_true[tid])
                assert abs(px.u - want.u) < 1e-9
                assert abs(px.v - want.v) < 1e-9

    def test_noiseless_observation_equals_true_pixels(self):
        scene = generate_scene(TORSO, RATIOS, None, NoiseSpec(), "front")
        for vi in (0, 1):
            for joint, px in scene.observation.views[vi].items():
                true = scene.keypoint_pixels_true[vi][joint]
                assert px == true

    def test_triangulating_true_pixels_recovers_keypoints(self):
        scene = generate_scene(TORSO, RATIOS, None, NoiseSpec(), "side")
        positions = triangulate_joints(
            scene.cameras[0], scene.cameras[1], scene.observation
        )
        for joint, got in positions.items():
            want = getattr(scene.keypoints_true, joint)
            assert np.linalg.norm(got - want) < 1e-6

    def test_targets_on_surface_with_analytic_normals(self):
        for kind in ("front", "side"):
            scene = generate_scene(TORSO, RATIOS, None, NoiseSpec(), kind)
            for tid, point in scene.targets_true.items():
                z = TORSO.surface_height(point[0], point[1])
                assert abs(point[2] - z) < 1e-9
                assert abs(point[0]) < TORSO.half_width
                normal = scene.target_normals_true[tid]
                assert abs(np.linalg.norm(normal) - 1) < 1e-9
                want = TORSO.surface_normal(point[0], point[1])
                assert np.allclose(normal, want, atol=1e-12)

    def test_scene_is_pure_function_of_inputs(self):
        noise = NoiseSpec(keypoint_sigma_px=1.5, depth_sigma_m=0.004, seed=42)
        a = generate_scene(TORSO, RATIOS, None, noise, "front")
        b = generate_scene(TORSO, RATIOS, None, noise, "front")
        for va, vb in zip(a.depths, b.depths):
            assert np.array_equal(va.values, vb.values)
        assert a.observation.views == b.observation.views
        assert a.target_pixels_observed == b.target_pixels_observed

    def test_missing_generative_ratios_rejected(self):
        from scanloc.targets import TargetModelParams

        with pytest.raises(ConfigError):
            generate_scene(TORSO, TargetModelParams(front={}), None, NoiseSpec(), "front")
        with pytest.raises(ConfigError):
            generate_scene(TORSO, TargetModelParams(side=None), None, NoiseSpec(), "side")

    def test_camera_missing_torso_rejected(self):
        cams = default_cameras(TORSO)
        from scanloc.geometry import PinholeCamera, RigidTransform

        off_pose = RigidTransform(
            cams[0].pose.rotation, cams[0].pose.translation + np.array([5.0, 0, 0])
        )
        bad = PinholeCamera(
            cams[0].fx, cams[0].fy, cams[0].cx, cams[0].cy,
            cams[0].width, cams[0].height, off_pose,
        )
        with pytest.raises(CameraMissesTorsoError):
            generate_scene(TORSO, RATIOS, (bad, cams[1]), NoiseSpec(), "front")


class TestNoise:
    def test_keypoint_noise_perturbs_observations(self):
        noise = NoiseSpec(keypoint_sigma_px=2.0, seed=9)
        scene = generate_scene(TORSO, RATIOS, None, noise, "front")
        deltas = []
        for vi in (0, 1):
            for joint, px in scene.observation.views[vi].items():
                true = scene.keypoint_pixels_true[vi][joint]
                deltas.append(np.hypot(px.u - true.u, px.v - true.v))
        deltas = np.array(deltas)
        assert (deltas > 0).all()
        assert deltas.max() < 20  # a few sigma

    def test_depth_noise_only_touches_valid_pixels(self):
        clean = generate_scene(TORSO, RATIOS, None, NoiseSpec(), "front")
        noisy = generate_scene(
            TORSO, RATIOS, None, NoiseSpec(depth_sigma_m=0.005, seed=3), "front"
        )
        for dc, dn in zip(clean.depths, noisy.depths):
            mask = dc.valid_mask
            assert np.array_equal(dn.values[~mask], dc.values[~mask])
            diff = dn.values[mask] - dc.values[mask]
            assert (diff != 0).mean() > 0.99
            assert abs(np.std(diff) - 0.005) < 0.0005

    def test_hip_fault_dropped_branch(self):
        # seed 0 drives the 50/50 branch to "dropped": the hip disappears
        # from both views
        noise = NoiseSpec(fault_prob={"right_hip": 1.0}, seed=0)
        scene = generate_scene(TORSO, RATIOS, None, noise, "side")
        assert scene.faulted_joints == {"right_hip": "dropped"}
        for vi in (0, 1):
            assert "right_hip" not in scene.observation.views[vi]
            assert "right_shoulder" in scene.observation.views[vi]

    def test_hip_fault_displaced_branch(self):
        # seed 1 drives the branch to "displaced": present in both views but
        # 50 px away from the truth
        noise = NoiseSpec(fault_prob={"right_hip": 1.0}, seed=1)
        scene = generate_scene(TORSO, RATIOS, None, noise, "side")
        assert scene.faulted_joints == {"right_hip": "displaced"}
        for vi in (0, 1):
            px = scene.observation.views[vi]["right_hip"]
            true = scene.keypoint_pixels_true[vi]["right_hip"]
            assert abs(np.hypot(px.u - true.u, px.v - true.v) - 50.0) < 1e-9

    def test_zero_fault_probability_never_faults(self):
        for seed in range(5):
            scene = generate_scene(
                TORSO, RATIOS, None, NoiseSpec(fault_prob={"right_hip": 0.0}, seed=seed), "side"
            )
            assert scene.faulted_joints == {}

    def test_invalid_noise_rejected(self):
        with pytest.raises(ConfigError):
            NoiseSpec(keypoint_sigma_px=-1)
        with pytest.raises(ConfigError):
            NoiseSpec(fault_prob={"left_elbow": 0.5})
        with pytest.raises(ConfigError):
            NoiseSpec(fault_prob={"right_hip": 1.5})


class TestCohort:
    def test_degenerate_intervals_give_fixed_spec(self):
        ranges = {name: (val, val) for name, val in TORSO.to_dict().items()}
        scenes = generate_cohort(1, ranges=ranges, seed=5)
        assert scenes[0].torso == TORSO

    def test_deterministic_and_index_addressable(self):
        a = generate_cohort(6, seed=21, pose_kind="side")
        b = generate_cohort(6, seed=21, pose_kind="side")
        for sa, sb in zip(a, b):
            assert sa.torso == sb.torso
            assert sa.noise == sb.noise
            assert np.array_equal(sa.depths[0].values, sb.depths[0].values)
        # scene i is reconstructible from (seed, i) alone, enabling parallel runs
        from scanloc.synth import DEFAULT_TORSO_RANGES

        solo = generate_cohort_scene(
            3, 21, DEFAULT_TORSO_RANGES, RATIOS, NoiseSpec(), "side"
        )
        assert solo.torso == a[3].torso
        assert np.array_equal(solo.depths[1].values, a[3].depths[1].values)

    def test_cohort_varies_anatomy_not_ratios(self):
        scenes = generate_cohort(5, seed=2, pose_kind="front")
        assert len({s.torso.half_width for s in scenes}) == 5
        assert all(s.ratios == scenes[0].ratios for s in scenes)

    def test_invalid_inputs_rejected(self):
        with pytest.raises(InvalidRangeError):
            generate_cohort(0)
        with pytest.raises(InvalidRangeError):
            generate_cohort(2, ranges={"half_width": (0.2, 0.1)})
        with pytest.raises(ConfigError):
            generate_cohort(2, ranges={"waist": (0.1, 0.2)})

    def test_scalar_range_value_allowed(self):
        scenes = generate_cohort(2, ranges={"base_height": 0.06}, seed=1)
        assert all(s.torso.base_height == 0.06 for s in scenes)


class TestSceneIO:
    def test_round_trip(self, tmp_path):
        noise = NoiseSpec(keypoint_sigma_px=1.0, depth_sigma_m=0.002,
                          fault_prob={"right_hip": 0.5}, seed=123)
        scene = generate_scene(TORSO, RATIOS, None, noise, "side")
        save_scene(scene, tmp_path / "s0")
        loaded = load_scene(tmp_path / "s0")
        assert loaded.scene_id == scene.scene_id
        assert loaded.pose_kind == "side"
        assert loaded.torso == scene.torso
        assert loaded.noise == scene.noise
        assert loaded.faulted_joints == scene.faulted_joints
        assert loaded.observation.views == scene.observation.views
        assert loaded.target_pixels_observed == scene.target_pixels_observed
        for vi in (0, 1):
            cam_a, cam_b = scene.cameras[vi], loaded.cameras[vi]
            assert (cam_a.fx, cam_a.cx, cam_a.width) == (cam_b.fx, cam_b.cx, cam_b.width)
            assert np.array_equal(cam_a.pose.rotation, cam_b.pose.rotation)
            # depth survives as float32
            assert np.array_equal(
                loaded.depths[vi].values, scene.depths[vi].values.astype(np.float32)
            )
        for tid, p in scene.targets_true.items():
            assert np.array_equal(loaded.targets_true[tid], p)

    def test_save_is_byte_deterministic(self, tmp_path):
        scene = generate_scene(TORSO, RATIOS, None, NoiseSpec(seed=4), "front")
        save_scene(scene, tmp_path / "a")
        save_scene(scene, tmp_path / "b")
        for name in ("scene.json", "depth_0.pfm", "depth_1.pfm"):
            assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)

    def test_unknown_scene_key_rejected(self, tmp_path):
        import json

        scene = generate_scene(TORSO, RATIOS, None, NoiseSpec(), "front")
        save_scene(scene, tmp_path / "s")
        path = tmp_path / "s" / "scene.json"
        data = json.loads(path.read_text())
        data["surprise"] = 1
        path.write_text(json.dumps(data))
        with pytest.raises(ConfigError):
            load_scene(tmp_path / "s")

    def test_cohort_round_trip_preserves_order(self, tmp_path):
        scenes = generate_cohort(3, seed=8, pose_kind="front")
        save_cohort(scenes, tmp_path)
        loaded = load_cohort(tmp_path)
        assert [s.scene_id for s in loaded] == [0, 1, 2]
        assert loaded[2].torso == scenes[2].torso


class TestClosure:
    def test_localize_with_generative_ratios_recovers_targets(self):
        for kind in ("front", "side"):
            scene = generate_scene(TORSO, RATIOS, None, NoiseSpec(), kind)
            cloud = fuse(list(zip(scene.cameras, scene.depths)), voxel=0.002)
            poses = localize(
                scene.cameras[0], scene.cameras[1], scene.observation, cloud,
                scene.ratios, kind, axes=scene.axes,
            )
            assert [p.target_id for p in poses] == sorted(scene.targets_true)
            for pose in poses:
                gt = scene.targets_true[pose.target_id]
                err = np.linalg.norm(pose.position - gt)
                assert err < 0.002, f"target {pose.target_id} off by {1000 * err:.2f} mm"
                nerr = angle_between_degrees(
                    pose.surface_normal, scene.target_normals_true[pose.target_id]
                )
                assert nerr < 1.0

    @staticmethod
    def cohort_dataset(scenes, target_id):
        samples = []
        for scene in scenes:
            positions = triangulate_joints(
                scene.cameras[0], scene.cameras[1], scene.observation
            )
            kps = Keypoints3D(
                left_shoulder=positions.get("left_shoulder"),
                right_shoulder=positions.get("right_shoulder"),
                right_hip=positions.get("right_hip"),
            )
            samples.append(
                FitSample(
                    keypoints=kps,
                    target=scene.targets_true[target_id],
                    scene_id=scene.scene_id,
                )
            )
        return FitDataset(samples)

    def test_noiseless_cohort_fit_recovers_front_ratios(self):
        scenes = generate_cohort(10, pose_kind="front", seed=31)
        for tid in (1, 2):
            result = fit_front(self.cohort_dataset(scenes, tid))
            want = RATIOS.front[tid]
            assert abs(result.ratios.segment_ratio - want.segment_ratio) < 1e-6
            assert abs(result.ratios.offset_ratio - want.offset_ratio) < 1e-6
            assert result.mean_planar_residual < 1e-6

    def test_noiseless_cohort_fit_recovers_side_ratios(self):
        scenes = generate_cohort(10, pose_kind="side", seed=31)
        result = fit_side(self.cohort_dataset(scenes, 4))
        assert abs(result.ratios.segment_ratio - RATIOS.side.segment_ratio) < 2e-3
        assert abs(result.ratios.offset_ratio - RATIOS.side.offset_ratio) < 2e-2
        assert result.mean_planar_residual < 0.002
