"""Camera intrinsics, Euler/SE(3) pose algebra, the pixel transform between
views, and the horizontal-flip relations for poses and intrinsics.

Conventions fixed here and relied on everywhere else:

* rotation = Rz(rz) @ Ry(ry) @ Rx(rx)
* a relative pose maps target-camera coordinates to source-camera
  coordinates: X_s = R @ X_t + t
* pixel coordinates are continuous, with integer positions at pixel centers
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GimbalLockError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose6:
    """Relative pose as translation (m) plus Euler angles (rad)."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def __post_init__(self):
        values = (self.tx, self.ty, self.tz, self.rx, self.ry, self.rz)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"pose components must be finite, got {values}")
        if not (abs(self.rx) < math.pi and abs(self.ry) < math.pi and abs(self.rz) < math.pi):
            raise ValueError(f"Euler angles must lie in (-pi, pi), got {values[3:]}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz])

    @classmethod
    def from_array(cls, a) -> "Pose6":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (6,):
            raise ValueError(f"pose array must have shape (6,), got {a.shape}")
        return cls(*[float(v) for v in a])


class TransformSE3:
    """Rigid transform: 3x3 rotation plus 3-vector translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64).reshape(3)
        if rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise ValueError("transform entries must be finite")
        err = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (deviation {err:.3e})")
        det = np.linalg.det(rotation)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation determinant {det} != +1")
        self.rotation = rotation
        self.translation = translation

    @classmethod
    def identity(cls) -> "TransformSE3":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "TransformSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def apply(self, points) -> np.ndarray:
        """Transform (3,) or (N, 3) points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __repr__(self):
        return f"TransformSE3(t={self.translation.tolist()})"


def rotation_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_to_transform(p: Pose6) -> TransformSE3:
    """Build the rigid transform Rz(rz)Ry(ry)Rx(rx) | (tx, ty, tz)."""
    rotation = rotation_z(p.rz) @ rotation_y(p.ry) @ rotation_x(p.rx)
    return TransformSE3(rotation, np.array([p.tx, p.ty, p.tz]))


def transform_to_pose(t: TransformSE3) -> Pose6:
    """Recover the 6-vector pose; inverse of `pose_to_transform`.

    Raises GimbalLockError within 1e-6 rad of pitch = +/-90 deg, where the
    decomposition degenerates.
    """
    r = t.rotation
    ry = math.asin(min(1.0, max(-1.0, -r[2, 0])))
    if abs(ry) > math.pi / 2 - 1e-6:
        raise GimbalLockError(f"pitch {ry} within 1e-6 of +/-pi/2; Euler decomposition degenerate")
    rx = math.atan2(r[2, 1], r[2, 2])
    rz = math.atan2(r[1, 0], r[0, 0])
    return Pose6(float(t.translation[0]), float(t.translation[1]), float(t.translation[2]),
                 rx, ry, rz)


def compose(a: TransformSE3, b: TransformSE3) -> TransformSE3:
    """a then-applied-after b: the homogeneous matrix product a @ b."""
    return TransformSE3(a.rotation @ b.rotation,
                        a.rotation @ b.translation + a.translation)


def invert(a: TransformSE3) -> TransformSE3:
    rt = a.rotation.T
    return TransformSE3(rt, -rt @ a.translation)


def pixel_transform(pt, depth: float, pose: Pose6, intrinsics: Intrinsics,
                    min_depth: float = 1e-6):
    """Map a target pixel with known depth into the source view.

    Back-projects (u, v) at `depth`, applies the pose, and re-projects with
    perspective division. Returns ((u_s, v_s), depth_s, valid); valid is
    False when the transformed point lies at or behind the camera plane
    (depth_s <= min_depth), in which case the coordinate is meaningless.
    """
    u, v = float(pt[0]), float(pt[1])
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    x = (u - intrinsics.cx) / intrinsics.fx * depth
    y = (v - intrinsics.cy) / intrinsics.fy * depth
    t = pose_to_transform(pose)
    xs, ys, zs = t.apply(np.array([x, y, depth]))
    if zs <= min_depth:
        return (math.nan, math.nan), float(zs), False
    us = intrinsics.fx * xs / zs + intrinsics.cx
    vs = intrinsics.fy * ys / zs + intrinsics.cy
    return (float(us), float(vs)), float(zs), True


def flip_pose(p: Pose6) -> Pose6:
    """Pose of the horizontally mirrored problem: negate tx, ry, rz."""
    return Pose6(-p.tx, p.ty, p.tz, p.rx, -p.ry, -p.rz)


FLIP_PAPER = "paper"
FLIP_PIXEL_CENTER = "pixel-center"


def flip_intrinsics(k: Intrinsics, mode: str = FLIP_PAPER) -> Intrinsics:
    """Principal point of the horizontally mirrored camera.

    `paper` mirrors about the continuous image edge (cx' = W - cx);
    `pixel-center` mirrors about the center of the pixel grid
    (cx' = (W - 1) - cx), which is the convention consistent with flipping
    stored images column-for-column.
    """
    if mode == FLIP_PAPER:
        cx = k.width - k.cx
    elif mode == FLIP_PIXEL_CENTER:
        cx = (k.width - 1) - k.cx
    else:
        raise ValueError(f"unknown flip mode {mode!r}")
    return Intrinsics(k.fx, k.fy, cx, k.cy, k.width, k.height)
