"""
Deterministic geometric transforms shared by the data generator, the encoders
and the metrics: cylindrical range view, camera back-projection, voxelization.

Ego frame: x forward, y left, z up, origin on the ground under the vehicle.
All functions are pure; arrays are float64 unless noted.
"""

import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from schemas import CameraSpec, LidarSpec, VoxelGridSpec

logger = logging.getLogger(__name__)

RANGE_CONSISTENCY_TOL = 1e-5


class GeometryError(ValueError):
    pass


class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class PointCloud(ArrayModel):
    points: np.ndarray
    ring_id: np.ndarray | None = None

    @field_validator("points", mode="before")
    @classmethod
    def as_points(cls, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(arr).all():
            raise GeometryError("point cloud contains non-finite coordinates")
        return arr

    @field_validator("ring_id", mode="before")
    @classmethod
    def as_rings(cls, v) -> np.ndarray | None:
        if v is None:
            return None
        return np.asarray(v, dtype=np.int64).reshape(-1)

    @model_validator(mode="after")
    def rings_match(self) -> "PointCloud":
        if self.ring_id is not None and len(self.ring_id) != len(self.points):
            raise GeometryError(f"ring_id has {len(self.ring_id)} entries for {len(self.points)} points")
        return self

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(points=np.zeros((0, 3)))

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    def subset(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(points=self.points[mask], ring_id=None if self.ring_id is None else self.ring_id[mask])

    @staticmethod
    def concat(*clouds: "PointCloud") -> "PointCloud":
        if not clouds:
            return PointCloud.empty()
        return PointCloud(points=np.concatenate([c.points for c in clouds], axis=0))


class RangeImage(ArrayModel):
    """4×H×W channels (x, y, z, r); an all-zero cell is empty."""

    channels: np.ndarray

    @field_validator("channels", mode="before")
    @classmethod
    def as_channels(cls, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 4:
            raise GeometryError(f"range image must be 4×H×W, got {arr.shape}")
        return arr

    @property
    def valid(self) -> np.ndarray:
        return self.channels[3] > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


class VoxelGrid(ArrayModel):
    spec: VoxelGridSpec
    values: np.ndarray

    @model_validator(mode="after")
    def consistent(self) -> "VoxelGrid":
        if tuple(self.values.shape) != tuple(self.spec.dims):
            raise GeometryError(f"values shape {self.values.shape} does not match dims {self.spec.dims}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise GeometryError("voxel values must lie in [0, 1]")
        return self

    @property
    def occupied(self) -> int:
        return int((self.values > 0.5).sum())


# ============================================================================
# Range view
# ============================================================================


def ring_elevations_rad(rings: int, spec: LidarSpec = LidarSpec()) -> np.ndarray:
    """Beam elevations, row 0 highest."""
    return np.deg2rad(np.linspace(spec.elevation_max_deg, spec.elevation_min_deg, rings))


def azimuth_column(points: np.ndarray, azimuths: int) -> np.ndarray:
    phi = np.arctan2(points[:, 1], points[:, 0])
    col = np.floor((phi + math.pi) / (2 * math.pi) * azimuths).astype(np.int64)
    return np.clip(col, 0, azimuths - 1)


def elevation_row(points: np.ndarray, rings: int, spec: LidarSpec = LidarSpec()) -> np.ndarray:
    """Nearest beam row for clouds without ring ids."""
    if rings == 1:
        return np.zeros(len(points), dtype=np.int64)
    r = np.linalg.norm(points, axis=1)
    incl = np.degrees(np.arcsin(np.clip(points[:, 2] / np.maximum(r, 1e-12), -1.0, 1.0)))
    step = (spec.elevation_max_deg - spec.elevation_min_deg) / (rings - 1)
    row = np.rint((spec.elevation_max_deg - incl) / step).astype(np.int64)
    return np.clip(row, 0, rings - 1)


def project_range_view(cloud: PointCloud, rings: int, azimuths: int, spec: LidarSpec = LidarSpec()) -> RangeImage:
    img = np.zeros((4, rings, azimuths))
    if len(cloud) == 0:
        return RangeImage(channels=img)

    pts = cloud.points
    r = cloud.ranges
    if cloud.ring_id is not None:
        row = cloud.ring_id
        if row.min() < 0 or row.max() >= rings:
            raise GeometryError(f"ring_id outside [0, {rings})")
    else:
        row = elevation_row(pts, rings, spec)
    col = azimuth_column(pts, azimuths)

    # keep-nearest on collisions: first entry of each cell after sorting by (cell, r)
    cell = row * azimuths + col
    order = np.lexsort((r, cell))
    _, first = np.unique(cell[order], return_index=True)
    keep = order[first]

    img[0:3, row[keep], col[keep]] = pts[keep].T
    img[3, row[keep], col[keep]] = r[keep]

    dropped = len(pts) - len(keep)
    if dropped:
        logger.debug("range view collisions | kept=%d dropped=%d", len(keep), dropped)
    return RangeImage(channels=img)


def unproject_range_view(img: RangeImage) -> PointCloud:
    valid = img.valid
    rows, _ = np.nonzero(valid)
    points = img.channels[0:3][:, valid].T
    return PointCloud(points=points, ring_id=rows)


# ============================================================================
# Cameras
# ============================================================================


def camera_rays(cam: CameraSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame origin (3,) and unit ray directions (H, W, 3) of every pixel."""
    cx, cy = cam.principal
    rows, cols = np.meshgrid(np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64), indexing="ij")
    right = (cols - cx) / cam.fx
    down = (rows - cy) / cam.fy

    forward = np.ones_like(right)
    left = -right
    up = -down

    c, s = math.cos(cam.pitch_rad), math.sin(cam.pitch_rad)
    dirs = np.stack([forward * c + up * s, left, -forward * s + up * c], axis=-1)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return np.asarray(cam.position_m, dtype=np.float64), dirs


def depth_to_points(depth: np.ndarray, cam: CameraSpec) -> PointCloud:
    depth = np.asarray(depth, dtype=np.float64).reshape(cam.height, cam.width)
    origin, dirs = camera_rays(cam)
    hit = depth > 0
    points = origin + dirs[hit] * depth[hit][:, None]
    return PointCloud(points=points)


# ============================================================================
# Voxels
# ============================================================================


def voxel_centers(spec: VoxelGridSpec) -> np.ndarray:
    """Ego-frame centers, shape (X, Y, Z, 3)."""
    axes = [spec.origin_m[k] + (np.arange(spec.dims[k]) + 0.5) * spec.resolution_m for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def voxel_indices(points: np.ndarray, spec: VoxelGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Integer voxel index per point and the in-bounds mask."""
    idx = np.floor((points - np.asarray(spec.origin_m)) / spec.resolution_m).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx, inside


def voxelize(cloud: PointCloud, spec: VoxelGridSpec) -> VoxelGrid:
    values = np.zeros(spec.dims)
    if len(cloud):
        idx, inside = voxel_indices(cloud.points, spec)
        idx = idx[inside]
        values[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(spec=spec, values=values)


def fuse_occupancy_target(lidar: PointCloud, depth_pts: PointCloud, spec: VoxelGridSpec) -> VoxelGrid:
    return voxelize(PointCloud.concat(lidar, depth_pts), spec)
