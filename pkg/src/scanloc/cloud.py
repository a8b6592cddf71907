"""Depth-map fusion into an oriented point cloud, plus planar depth lookup.

Depth maps from the two calibrated cameras are deprojected pixel by pixel
into the base frame and merged.  The merged cloud is voxel-downsampled
(centroid per voxel), normals are estimated by PCA over the k nearest 3D
neighbors and oriented toward the cameras, and a 2D grid hash over XY
serves nearest-neighbor queries in the horizontal plane.

The planar lookup implements the depth-adjustment rule this pipeline is
built around: a regressed target keeps its XY coordinates, while its Z and
surface normal are copied from the cloud point closest in XY.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloudError
from .geometry import PinholeCamera

# Depth readings beyond this are treated as invalid (sensor range limit).
MAX_DEPTH = 10.0
# Planar NN farther than this from the query marks the result suspicious.
FAR_FROM_SURFACE = 0.020
DEFAULT_VOXEL = 0.005
DEFAULT_NORMAL_NEIGHBORS = 30
# Grid cells never get smaller than this, whatever the voxel size.
MIN_CELL = 0.005

_CLOUD_MAGIC = b"SCLOUD01"


@dataclass(frozen=True, eq=False)
class DepthMap:
    """A single camera's depth image in meters; 0 or NaN marks invalid pixels."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError(f"depth map must be 2D, got shape {v.shape}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        v = self.values
        return np.isfinite(v) & (v > 0) & (v <= MAX_DEPTH)


def write_pfm(path, values) -> None:
    """Write a grayscale PFM file (little-endian, rows stored bottom-up)."""
    v = np.asarray(values, dtype="<f4")
    if v.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{v.shape[1]} {v.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(v).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM file into a (height, width) float32 array."""
    with open(path, "rb") as fh:
        def token():
            chars = []
            ch = fh.read(1)
            while ch and ch.isspace():
                ch = fh.read(1)
            while ch and not ch.isspace():
                chars.append(ch)
                ch = fh.read(1)
            return b"".join(chars)

        magic = token()
        if magic != b"Pf":
            raise ValueError(f"not a grayscale PFM file (magic {magic!r})")
        width = int(token())
        height = int(token())
        scale = float(token())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(width * height * 4), dtype=dtype)
        if data.size != width * height:
            raise ValueError("PFM file truncated")
    return np.flipud(data.reshape(height, width)).astype(np.float32)


class PlanarGrid:
    """Exact nearest-neighbor queries over point XY coordinates.

    Points are bucketed into square cells; a query scans expanding
    Chebyshev rings of cells around the target until no farther ring can
    contain a closer point.  Distances are plain Euclidean in XY, ties
    break toward the smallest point index, matching a linear scan exactly.
    """

    def __init__(self, points: np.ndarray, cell: float):
        if len(points) == 0:
            raise EmptyCloudError("cannot index an empty cloud")
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.cell = float(cell)
        self.xy = np.ascontiguousarray(points[:, :2], dtype=float)
        keys = np.floor(self.xy / self.cell).astype(np.int64)
        # group indices per cell; within a cell indices stay ascending
        order = np.lexsort((np.arange(len(keys)), keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        boundaries = np.nonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1))[0] + 1
        starts = np.concatenate([[0], boundaries, [len(keys)]])
        self._cells = {}
        for s, e in zip(starts[:-1], starts[1:]):
            self._cells[tuple(sorted_keys[s])] = order[s:e]
        self._kmin = keys.min(axis=0)
        self._kmax = keys.max(axis=0)

    def _ring_cells(self, center, radius):
        cx, cy = center
        x0 = max(cx - radius, self._kmin[0])
        x1 = min(cx + radius, self._kmax[0])
        y0 = max(cy - radius, self._kmin[1])
        y1 = min(cy + radius, self._kmax[1])
        if x0 > x1 or y0 > y1:
            return
        if radius == 0:
            yield (cx, cy)
            return
        for i in range(x0, x1 + 1):
            if abs(i - cx) == radius:
                for j in range(y0, y1 + 1):
                    yield (i, j)
            else:
                if cy - radius >= y0:
                    yield (i, cy - radius)
                if cy + radius <= y1:
                    yield (i, cy + radius)

    def query(self, target_xy) -> tuple[int, float]:
        """Return (point index, planar distance) of the XY-nearest point."""
        t = np.asarray(target_xy, dtype=float).reshape(-1)[:2]
        cx, cy = (int(c) for c in np.floor(t / self.cell).astype(np.int64))
        # distance (in whole rings) from the target's cell to the occupied box
        start = max(
            self._kmin[0] - cx, cx - self._kmax[0],
            self._kmin[1] - cy, cy - self._kmax[1],
            0,
        )
        r_max = int(
            max(
                abs(self._kmin[0] - cx), abs(self._kmax[0] - cx),
                abs(self._kmin[1] - cy), abs(self._kmax[1] - cy),
            )
        )
        best_d2 = math.inf
        best_idx = -1
        for radius in range(int(start), r_max + 1):
            if best_idx >= 0 and (radius - 1) * self.cell > math.sqrt(best_d2):
                break
            for key in self._ring_cells((cx, cy), radius):
                idxs = self._cells.get(key)
                if idxs is None:
                    continue
                d2 = ((self.xy[idxs] - t) ** 2).sum(axis=1)
                j = np.lexsort((idxs, d2))[0]
                if d2[j] < best_d2 or (d2[j] == best_d2 and idxs[j] < best_idx):
                    best_d2 = float(d2[j])
                    best_idx = int(idxs[j])
        return best_idx, math.sqrt(best_d2)


@dataclass(frozen=True, eq=False)
class PlanarNeighbor:
    """The cloud point that is nearest to a query in the XY plane."""

    point: np.ndarray
    normal: np.ndarray
    planar_distance: float
    index: int


@dataclass(frozen=True, eq=False)
class AdjustedTarget:
    """A target after snapping its depth and normal to the cloud surface."""

    position: np.ndarray
    normal: np.ndarray
    planar_distance: float
    far_from_surface: bool


@dataclass(frozen=True, eq=False)
class FusedCloud:
    """An oriented point cloud with a planar lookup index."""

    points: np.ndarray
    normals: np.ndarray
    cell: float = MIN_CELL
    _grid: PlanarGrid = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        nrm = np.asarray(self.normals, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape != nrm.shape:
            raise ValueError("points and normals must both have shape (N, 3)")
        if len(pts) == 0:
            raise EmptyCloudError("a fused cloud needs at least one point")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(nrm))):
            raise ValueError("cloud coordinates must be finite")
        lengths = np.linalg.norm(nrm, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-5):
            raise ValueError("normals must be unit length")
        pts = pts.copy()
        nrm = nrm.copy()
        pts.flags.writeable = False
        nrm.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "_grid", PlanarGrid(pts, max(self.cell, MIN_CELL)))

    def __len__(self) -> int:
        return len(self.points)

    def planar_nearest(self, target_xy) -> PlanarNeighbor:
        idx, dist = self._grid.query(target_xy)
        return PlanarNeighbor(
            point=self.points[idx],
            normal=self.normals[idx],
            planar_distance=dist,
            index=idx,
        )

    def save(self, path) -> None:
        """Write the cloud as little-endian float32 triplets (points, then normals)."""
        with open(path, "wb") as fh:
            fh.write(_CLOUD_MAGIC)
            fh.write(struct.pack("<Q", len(self.points)))
            fh.write(self.points.astype("<f4").tobytes())
            fh.write(self.normals.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, cell: float = MIN_CELL) -> "FusedCloud":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _CLOUD_MAGIC:
                raise ValueError(f"not a cloud file (magic {magic!r})")
            (count,) = struct.unpack("<Q", fh.read(8))
            data = np.frombuffer(fh.read(count * 24), dtype="<f4")
            if data.size != count * 6:
                raise ValueError("cloud file truncated")
        points = data[: count * 3].reshape(count, 3).astype(float)
        normals = data[count * 3 :].reshape(count, 3).astype(float)
        # float32 storage leaves ~1e-8 slack on unit length; renormalize
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        return cls(points=points, normals=normals, cell=cell)


def fuse(
    views: list[tuple[PinholeCamera, DepthMap]],
    voxel: float = DEFAULT_VOXEL,
    normal_neighbors: int = DEFAULT_NORMAL_NEIGHBORS,
) -> FusedCloud:
    """Deproject every valid depth pixel and merge the views into one cloud.

    Points are gathered per view in row-major pixel order (a fixed ordering
    no matter how the work is scheduled), optionally voxel-downsampled to
    per-voxel centroids, and given PCA normals oriented toward the cameras.
    """
    chunks = []
    centers = []
    for camera, depth in views:
        centers.append(camera.center)
        mask = depth.valid_mask
        if not mask.any():
            continue
        rows, cols = np.nonzero(mask)
        z = depth.values[rows, cols]
        p_cam = np.empty((len(z), 3))
        p_cam[:, 0] = (cols - camera.cx) * z / camera.fx
        p_cam[:, 1] = (rows - camera.cy) * z / camera.fy
        p_cam[:, 2] = z
        chunks.append(camera.pose.apply(p_cam))
    if not chunks:
        raise EmptyCloudError("no valid depth pixels in any view")
    points = np.vstack(chunks)
    if voxel > 0:
        points = _voxel_centroids(points, voxel)
    toward = np.mean(centers, axis=0)
    normals = _pca_normals(points, normal_neighbors, toward)
    return FusedCloud(points=points, normals=normals, cell=max(voxel, MIN_CELL))


def _voxel_centroids(points: np.ndarray, voxel: float) -> np.ndarray:
    keys = np.floor(points / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, points)
    counts = np.bincount(inverse, minlength=len(uniq))
    return sums / counts[:, None]


def _pca_normals(points: np.ndarray, k: int, toward: np.ndarray) -> np.ndarray:
    """Smallest principal axis of each point's k-neighborhood, facing `toward`."""
    n = len(points)
    if n < 3:
        # not enough structure for a plane fit; point back at the cameras
        direction = toward - points
        lengths = np.linalg.norm(direction, axis=1, keepdims=True)
        fallback = np.where(lengths > 1e-12, direction / lengths, [[0.0, 0.0, 1.0]])
        return fallback
    k = min(k, n)
    tree = cKDTree(points)
    normals = np.empty_like(points)
    chunk = 20000
    for start in range(0, n, chunk):
        block = points[start : start + chunk]
        _, idx = tree.query(block, k=k)
        neighborhoods = points[idx]
        centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
        cov = np.einsum("mki,mkj->mij", centered, centered)
        _, vecs = np.linalg.eigh(cov)
        normals[start : start + chunk] = vecs[:, :, 0]
    flip = np.einsum("ij,ij->i", normals, toward - points) < 0
    normals[flip] *= -1.0
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def adjust_target(cloud: FusedCloud, target) -> AdjustedTarget:
    """Snap a regressed target onto the observed surface.

    XY stays put; Z and the normal come from the XY-nearest cloud point.
    A neighbor farther than FAR_FROM_SURFACE in the plane sets the
    far_from_surface flag: the regression landed off the scanned surface.
    """
    t = np.asarray(target, dtype=float).reshape(-1)
    if t.shape[0] < 2:
        raise ValueError("target must provide at least XY coordinates")
    neighbor = cloud.planar_nearest(t[:2])
    position = np.array([t[0], t[1], neighbor.point[2]])
    return AdjustedTarget(
        position=position,
        normal=neighbor.normal.copy(),
        planar_distance=neighbor.planar_distance,
        far_from_surface=neighbor.planar_distance > FAR_FROM_SURFACE,
    )
