"""Rigid transforms, pinhole cameras, and two-view triangulation.

Conventions used throughout the package:

* World/base frame: Z is up, X/Y span the horizontal plane.  All distances
  are meters, all image coordinates are pixels.
* A camera pose maps camera-frame coordinates to base-frame coordinates.
  The camera frame is the usual computer-vision one: +Z looks into the
  scene, +X right, +Y down in the image.
* Rotations are stored as 3x3 matrices.  Angle-axis 3-vectors appear only
  at the 6D pose boundary (gripper targets, serialized poses).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    ConfigError,
    DegenerateGeometryError,
    NonPositiveDepthError,
    ZeroVectorError,
)

# Constructors reject matrices farther than this from the orthonormal group.
_ROTATION_ATOL = 1e-8
# Smallest camera-frame depth considered in front of the camera.
MIN_DEPTH = 1e-9


def _as_vec3(value, name: str) -> np.ndarray:
    v = np.asarray(value, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(value)}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite, got {v}")
    return v


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A rotation plus translation acting on 3D points (p' = R @ p + t)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {rot.shape}")
        if not np.all(np.isfinite(rot)):
            raise ValueError("rotation must be finite")
        if np.linalg.norm(rot.T @ rot - np.eye(3)) > _ROTATION_ATOL:
            raise ValueError("rotation matrix is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation matrix is a reflection (det < 0)")
        trans = _as_vec3(self.translation, "translation")
        rot = rot.copy()
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def orthonormalized(cls, rotation, translation) -> "RigidTransform":
        """Build a transform from a noisy rotation, projecting it onto SO(3)."""
        rot = np.asarray(rotation, dtype=float)
        u, _, vt = np.linalg.svd(rot)
        proj = u @ vt
        if np.linalg.det(proj) < 0:
            u[:, -1] = -u[:, -1]
            proj = u @ vt
        return cls(proj, translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or many points (N, 3)."""
        p = np.asarray(points, dtype=float)
        if p.shape == (3,):
            return self.rotation @ p + self.translation
        if p.ndim == 2 and p.shape[1] == 3:
            return p @ self.rotation.T + self.translation
        raise ValueError(f"points must have shape (3,) or (N, 3), got {p.shape}")

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return the transform applying `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RigidTransform":
        _check_keys(data, {"rotation", "translation"}, "pose")
        rot = np.asarray(data["rotation"], dtype=float)
        if rot.size != 9:
            raise ConfigError("pose rotation must hold 9 row-major values")
        return cls(rot.reshape(3, 3), np.asarray(data["translation"], dtype=float))


def angle_axis_to_rotation(angle_axis) -> np.ndarray:
    """Convert an angle-axis 3-vector (axis * angle in radians) to a matrix."""
    v = _as_vec3(angle_axis, "angle_axis")
    return Rotation.from_rotvec(v).as_matrix()


def rotation_to_angle_axis(rotation) -> np.ndarray:
    """Convert a rotation matrix to an angle-axis 3-vector (angle in [0, pi])."""
    rot = np.asarray(rotation, dtype=float)
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {rot.shape}")
    return Rotation.from_matrix(rot).as_rotvec()


def angle_between_degrees(a, b) -> float:
    """Angle between two nonzero 3-vectors, in degrees."""
    va = _as_vec3(a, "a")
    vb = _as_vec3(b, "b")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVectorError("cannot measure an angle against a zero vector")
    cos = np.clip(np.dot(va / na, vb / nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


class Pixel(NamedTuple):
    """Continuous image coordinates: u along columns, v along rows."""

    u: float
    v: float


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    """Pinhole intrinsics plus the camera-to-base pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in the base frame."""
        return self.pose.translation

    def contains(self, pixel: Pixel) -> bool:
        return 0 <= pixel.u < self.width and 0 <= pixel.v < self.height

    def project(self, point) -> Pixel:
        """Project a base-frame point into the image.

        Raises NonPositiveDepthError when the point sits at or behind the
        camera plane.  The returned pixel may fall outside the image bounds;
        callers decide whether that matters.
        """
        p_cam = self.pose.inverse().apply(_as_vec3(point, "point"))
        z = p_cam[2]
        if z <= MIN_DEPTH:
            raise NonPositiveDepthError(f"point has camera depth {z:.3e} m")
        return Pixel(
            float(self.fx * p_cam[0] / z + self.cx),
            float(self.fy * p_cam[1] / z + self.cy),
        )

    def project_many(self, points) -> np.ndarray:
        """Vectorized projection of (N, 3) base-frame points to (N, 2) pixels."""
        p_cam = self.pose.inverse().apply(np.asarray(points, dtype=float))
        z = p_cam[:, 2]
        if np.any(z <= MIN_DEPTH):
            raise NonPositiveDepthError("at least one point sits behind the camera")
        uv = np.empty((len(p_cam), 2))
        uv[:, 0] = self.fx * p_cam[:, 0] / z + self.cx
        uv[:, 1] = self.fy * p_cam[:, 1] / z + self.cy
        return uv

    def deproject(self, pixel: Pixel, depth: float) -> np.ndarray:
        """Lift a pixel with a known camera-frame depth back to the base frame."""
        if depth <= MIN_DEPTH:
            raise NonPositiveDepthError(f"depth must be positive, got {depth!r}")
        p_cam = np.array(
            [
                (pixel.u - self.cx) * depth / self.fx,
                (pixel.v - self.cy) * depth / self.fy,
                depth,
            ]
        )
        return self.pose.apply(p_cam)

    def pixel_rays(self, uv) -> tuple[np.ndarray, np.ndarray]:
        """Base-frame rays through pixels, scaled so depth equals the ray parameter.

        Returns (origin (3,), directions (N, 3)); a point `origin + t * dir`
        has camera-frame depth exactly t.
        """
        uv = np.asarray(uv, dtype=float)
        dirs_cam = np.empty((len(uv), 3))
        dirs_cam[:, 0] = (uv[:, 0] - self.cx) / self.fx
        dirs_cam[:, 1] = (uv[:, 1] - self.cy) / self.fy
        dirs_cam[:, 2] = 1.0
        return self.pose.translation.copy(), dirs_cam @ self.pose.rotation.T

    def projection_matrix(self) -> np.ndarray:
        """The 3x4 matrix mapping homogeneous base-frame points to pixels."""
        k = np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]])
        inv = self.pose.inverse()
        rt = np.hstack([inv.rotation, inv.translation[:, None]])
        return k @ rt

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "pose": self.pose.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PinholeCamera":
        _check_keys(
            data, {"fx", "fy", "cx", "cy", "width", "height", "pose"}, "camera"
        )
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                width=int(data["width"]),
                height=int(data["height"]),
                pose=RigidTransform.from_dict(data["pose"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad camera description: {exc}") from exc


def save_camera(camera: PinholeCamera, path) -> None:
    with open(path, "w") as fh:
        json.dump(camera.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_camera(path) -> PinholeCamera:
    with open(path) as fh:
        return PinholeCamera.from_dict(json.load(fh))


def triangulate(
    camera_a: PinholeCamera,
    camera_b: PinholeCamera,
    pixel_a: Pixel,
    pixel_b: Pixel,
) -> np.ndarray:
    """Recover the 3D point observed at pixel_a/pixel_b in two views.

    Uses the homogeneous DLT: each view contributes the two cross-product
    constraint rows, the stacked 4x4 system is solved by SVD, and the right
    singular vector of the smallest singular value is dehomogenized.
    """
    baseline = np.linalg.norm(camera_a.center - camera_b.center)
    if baseline <= 1e-6:
        raise DegenerateGeometryError(
            f"camera centers are {baseline:.2e} m apart; need a real baseline"
        )
    _, ray_a = camera_a.pixel_rays([pixel_a])
    _, ray_b = camera_b.pixel_rays([pixel_b])
    da = ray_a[0] / np.linalg.norm(ray_a[0])
    db = ray_b[0] / np.linalg.norm(ray_b[0])
    if np.linalg.norm(np.cross(da, db)) < 1e-9:
        raise DegenerateGeometryError("viewing rays are parallel")

    rows = []
    for cam, pix in ((camera_a, pixel_a), (camera_b, pixel_b)):
        p = cam.projection_matrix()
        rows.append(pix.u * p[2] - p[0])
        rows.append(pix.v * p[2] - p[1])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hom = vt[-1]
    if abs(hom[3]) < 1e-12 * np.linalg.norm(hom):
        raise DegenerateGeometryError("triangulated point is at infinity")
    return hom[:3] / hom[3]


def _check_keys(data: dict, allowed: set, context: str) -> None:
    """Reject unknown keys so config typos fail loudly instead of silently."""
    if not isinstance(data, dict):
        raise ConfigError(f"{context} must be a JSON object")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")
