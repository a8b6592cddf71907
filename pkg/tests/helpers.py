"""Shared builders for test scenes: cameras, transforms, analytic renders."""

import numpy as np
from scipy.spatial.transform import Rotation

from scanloc.geometry import PinholeCamera, RigidTransform


def random_transform(rng, trans_scale=1.0) -> RigidTransform:
    rot = Rotation.random(random_state=np.random.RandomState(rng.integers(2**31)))
    return RigidTransform(rot.as_matrix(), rng.uniform(-trans_scale, trans_scale, 3))


def look_at_camera(center, target, fx=600.0, width=640, height=480) -> PinholeCamera:
    """Camera at `center` with its optical axis through `target`.

    Image "down" (+v) is aligned with world +Y as far as the viewing
    direction allows, which keeps top-down cameras consistently rolled.
    """
    center = np.asarray(center, dtype=float)
    forward = np.asarray(target, dtype=float) - center
    forward = forward / np.linalg.norm(forward)
    down_ref = np.array([0.0, 1.0, 0.0])
    y_cam = down_ref - np.dot(down_ref, forward) * forward
    norm = np.linalg.norm(y_cam)
    if norm < 1e-9:
        raise ValueError("viewing direction parallel to the +Y roll reference")
    y_cam = y_cam / norm
    x_cam = np.cross(y_cam, forward)
    pose = RigidTransform(np.column_stack([x_cam, y_cam, forward]), center)
    return PinholeCamera(fx, fx, width / 2, height / 2, width, height, pose)


def pixel_ray_grid(camera: PinholeCamera):
    """Raw ray math for every pixel: origin plus direction with unit camera depth.

    Written out longhand (no camera-class helpers) so renders built on it
    stay independent of the library's projection code.
    """
    us, vs = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    dx = (us.ravel() - camera.cx) / camera.fx
    dy = (vs.ravel() - camera.cy) / camera.fy
    dirs_cam = np.column_stack([dx, dy, np.ones_like(dx)])
    dirs = dirs_cam @ camera.pose.rotation.T
    return camera.pose.translation, dirs


def render_sphere_depth(
    camera: PinholeCamera, center, radius, max_incidence_deg=75.0
) -> np.ndarray:
    """Analytic depth map of the camera-facing sphere cap; misses are 0.

    Pixels whose ray grazes the surface beyond max_incidence_deg are left
    invalid: a real depth camera returns garbage there, and the "faces the
    rig" normal orientation is undefined at the exact silhouette.
    """
    origin, dirs = pixel_ray_grid(camera)
    oc = origin - np.asarray(center, dtype=float)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius**2
    disc = b * b - 4 * a * c
    hit = disc > 0
    depth = np.zeros(len(dirs))
    t = (-b[hit] - np.sqrt(disc[hit])) / (2 * a[hit])
    points = origin + t[:, None] * dirs[hit]
    radial = (points - center) / radius
    ray_unit = dirs[hit] / np.linalg.norm(dirs[hit], axis=1, keepdims=True)
    incidence = np.degrees(np.arccos(np.clip(-np.einsum("ij,ij->i", radial, ray_unit), -1, 1)))
    t[(t <= 0) | (incidence > max_incidence_deg)] = 0.0
    depth[hit] = t
    return depth.reshape(camera.height, camera.width)


# Independent transcriptions of the target-regression construction.  The
# perpendicular direction comes from scipy's null-space routine rather than a
# cross product, so these share no code path with the library.


def oracle_perpendicular(start, end, reference):
    from scipy.linalg import null_space

    seg = np.asarray(end, dtype=float) - np.asarray(start, dtype=float)
    t1 = seg / np.linalg.norm(seg)
    rows = np.vstack([t1, [0.0, 0.0, 1.0]])
    basis = null_space(rows)
    assert basis.shape == (3, 1), "segment must not be vertical"
    t2 = basis[:, 0]
    t2 = t2 / np.linalg.norm(t2)
    if np.dot(t2, np.asarray(reference, dtype=float)) < 0:
        t2 = -t2
    return t2


def oracle_front_target(f1, f2, r1, r2, reference):
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    t1_len = np.linalg.norm(f2 - f1)
    f3 = f1 + r1 * (f2 - f1)
    t2 = oracle_perpendicular(f1, f2, reference)
    lam = r2 * t1_len
    return f3 + lam * t2


def oracle_side_target(s1, s2, r1, r2, reference):
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    s3 = s1 + r1 * (s2 - s1)
    t2 = oracle_perpendicular(s1, s2, reference)
    return s3 + r2 * np.linalg.norm(s3 - s1) * t2


def make_front_dataset(rng, n, ratios, noise_sigma=0.0, with_hip=True):
    """Shoulder-pair fit samples with targets from the oracle formulas."""
    from scanloc.targets import FitDataset, FitSample, Keypoints3D, front_reference

    samples = []
    for i in range(n):
        ls = np.array(
            [rng.uniform(-0.05, 0.05), rng.uniform(0.05, 0.15), rng.uniform(0.03, 0.08)]
        )
        phi = rng.uniform(-0.4, 0.4)
        span = rng.uniform(0.26, 0.34)
        seg = np.array([span * np.cos(phi), span * np.sin(phi), rng.uniform(-0.05, 0.05)])
        rs = ls + seg
        mid = 0.5 * (ls + rs)
        hip = mid + np.array(
            [rng.uniform(-0.05, 0.05), rng.uniform(0.30, 0.40), rng.uniform(-0.06, -0.02)]
        )
        kps = Keypoints3D(
            left_shoulder=ls, right_shoulder=rs, right_hip=hip if with_hip else None
        )
        ref = front_reference(kps, np.array([0.0, 1.0, 0.0]))
        target = oracle_front_target(ls, rs, ratios[0], ratios[1], ref)
        target = target + noise_sigma * rng.standard_normal(3)
        samples.append(FitSample(keypoints=kps, target=target, scene_id=i))
    return FitDataset(samples)


def make_side_dataset(rng, n, ratios, noise_sigma=0.0, length_range=(0.40, 0.48)):
    """Shoulder-hip fit samples with targets from the oracle formulas."""
    from scanloc.targets import FitDataset, FitSample, Keypoints3D

    reference = np.array([1.0, 0.0, 0.0])
    samples = []
    for i in range(n):
        shoulder = np.array(
            [rng.uniform(0.10, 0.16), rng.uniform(0.06, 0.12), rng.uniform(0.03, 0.07)]
        )
        seg = np.array(
            [rng.uniform(-0.05, 0.01), rng.uniform(*length_range), rng.uniform(-0.02, 0.02)]
        )
        kps = Keypoints3D(right_shoulder=shoulder, right_hip=shoulder + seg)
        target = oracle_side_target(shoulder, shoulder + seg, ratios[0], ratios[1], reference)
        target = target + noise_sigma * rng.standard_normal(3)
        samples.append(FitSample(keypoints=kps, target=target, scene_id=i))
    return FitDataset(samples)
