"""Projection of 3-D lidar point clouds into the camera frame, producing the
image-aligned sparse depth maps the optimizer consumes, plus the inverse
back-projection used for round-trip checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import Intrinsics, TransformSE3
from .imaging import D_MAX, D_MIN, SparseDepthMap

# tolerance added before truncating continuous pixel coordinates to bins so
# that re-projections of back-projected points land on their source pixel
# despite float round-off
_BIN_EPS = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """Points in the lidar frame, meters; optional per-point reflectance."""

    points: np.ndarray
    reflectance: np.ndarray = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.reflectance is not None:
            r = np.asarray(self.reflectance, dtype=np.float64).reshape(-1)
            if r.shape[0] != p.shape[0]:
                raise ValueError(f"{r.shape[0]} reflectance values for {p.shape[0]} points")
            object.__setattr__(self, "reflectance", r)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class ExtrinsicCalib:
    """Lidar-to-camera rigid transform."""

    velo_to_cam: TransformSE3


def load_velodyne(path) -> PointCloud:
    """Read a velodyne scan: little-endian float32 quadruples (x, y, z, r)."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of 16 bytes (x, y, z, reflectance)")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(points=data[:, :3].astype(np.float64),
                      reflectance=data[:, 3].astype(np.float64))


def save_velodyne(cloud: PointCloud, path):
    """Inverse of load_velodyne."""
    n = len(cloud)
    data = np.zeros((n, 4), dtype="<f4")
    data[:, :3] = cloud.points
    if cloud.reflectance is not None:
        data[:, 3] = cloud.reflectance
    Path(path).write_bytes(data.tobytes())


def project_to_sparse_depth(cloud: PointCloud, calib: ExtrinsicCalib,
                            intrinsics: Intrinsics, min_depth: float = D_MIN,
                            max_depth: float = D_MAX) -> SparseDepthMap:
    """Project a point cloud into the image, keeping the nearest depth per
    pixel.

    Points behind `min_depth`, beyond `max_depth` or projecting outside the
    image are discarded. Pixel binning truncates the continuous coordinates.
    An empty cloud yields an all-invalid map.
    """
    k = intrinsics
    values = np.zeros((k.height, k.width))
    if len(cloud) == 0:
        return SparseDepthMap(values)
    cam = calib.velo_to_cam.apply(cloud.points)
    z = cam[:, 2]
    keep = (z > min_depth) & (z <= max_depth)
    cam = cam[keep]
    z = z[keep]
    if cam.size == 0:
        return SparseDepthMap(values)
    u = np.floor(k.fx * cam[:, 0] / z + k.cx + _BIN_EPS).astype(np.int64)
    v = np.floor(k.fy * cam[:, 1] / z + k.cy + _BIN_EPS).astype(np.int64)
    inside = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    u, v, z = u[inside], v[inside], z[inside]
    if z.size == 0:
        return SparseDepthMap(values)
    buffer = np.full((k.height, k.width), np.inf)
    np.minimum.at(buffer, (v, u), z)
    occupied = np.isfinite(buffer)
    values[occupied] = buffer[occupied]
    return SparseDepthMap(values)


def back_project(depth: SparseDepthMap, intrinsics: Intrinsics) -> PointCloud:
    """Camera-frame points for every valid pixel: depth * K^-1 (u, v, 1)."""
    k = intrinsics
    v_idx, u_idx = np.nonzero(depth.mask)
    z = depth.values[v_idx, u_idx]
    x = (u_idx - k.cx) / k.fx * z
    y = (v_idx - k.cy) / k.fy * z
    return PointCloud(points=np.stack([x, y, z], axis=1))
