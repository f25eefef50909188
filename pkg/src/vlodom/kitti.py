"""KITTI odometry dataset ingestion: calibration and pose files, image and
velodyne scan indexing, plus the speed-balanced snippet sampler and its
speed-distribution reporting.

Directory layout expected under a dataset root:

    sequences/NN/image_2/*.png     left color camera frames
    sequences/NN/velodyne/*.bin    lidar scans (float32 x, y, z, reflectance)
    sequences/NN/calib.txt         P0..P3 projections and Tr (velo -> cam0)
    poses/NN.txt                   ground-truth camera poses, 3x4 row-major
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibParseError
from .evaluation import Trajectory
from .geometry import Intrinsics, TransformSE3, compose, invert
from .lidar import ExtrinsicCalib

FRAME_RATE_HZ = 10.0
MPS_TO_KMH = 3.6


def parse_calib(text: str, image_size=None):
    """Parse a KITTI odometry calib.txt.

    Returns ({camera index: Intrinsics}, ExtrinsicCalib). Projection lines
    "P0:".."P3:" carry 12 numbers (3x4 row-major); "Tr:" carries the
    velodyne-to-camera transform. `image_size` = (width, height) fills the
    intrinsics dimensions; KITTI calib files do not store them.
    """
    width, height = image_size if image_size is not None else (1241, 376)
    intrinsics = {}
    extrinsic = None
    projections = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        tag, _, rest = line.partition(":")
        values = rest.split()
        if len(values) != 12:
            raise CalibParseError(f"{tag}: expected 12 numbers, got {len(values)}", line_no)
        try:
            numbers = [float(v) for v in values]
        except ValueError as e:
            raise CalibParseError(f"non-numeric token in {tag}: {e}", line_no) from None
        matrix = np.array(numbers).reshape(3, 4)
        if tag.startswith("P") and tag[1:].isdigit():
            cam = int(tag[1:])
            projections[cam] = matrix
            intrinsics[cam] = Intrinsics(
                fx=matrix[0, 0], fy=matrix[1, 1], cx=matrix[0, 2], cy=matrix[1, 2],
                width=width, height=height)
        elif tag == "Tr":
            extrinsic = ExtrinsicCalib(TransformSE3(matrix[:, :3], matrix[:, 3]))
    if extrinsic is None:
        raise CalibParseError("missing 'Tr:' line", None)
    return intrinsics, extrinsic, projections


def camera_extrinsic(base: ExtrinsicCalib, projection: np.ndarray,
                     intrinsics: Intrinsics) -> ExtrinsicCalib:
    """Velodyne-to-camera-N chain: Tr followed by the projection's baseline
    offset (P[:, 3] = K @ t for rectified KITTI cameras)."""
    t_extra = np.array([projection[0, 3] / intrinsics.fx,
                        projection[1, 3] / intrinsics.fy,
                        projection[2, 3]])
    shift = TransformSE3(np.eye(3), t_extra)
    return ExtrinsicCalib(compose(shift, base.velo_to_cam))


def format_calib(intrinsics_by_cam, extrinsic: ExtrinsicCalib) -> str:
    """Inverse of parse_calib for synthetic datasets."""
    lines = []
    for cam in sorted(intrinsics_by_cam):
        k = intrinsics_by_cam[cam]
        p = np.zeros((3, 4))
        p[:3, :3] = k.matrix()
        lines.append(f"P{cam}: " + " ".join(f"{v:.12e}" for v in p.ravel()))
    tr = np.hstack([extrinsic.velo_to_cam.rotation,
                    extrinsic.velo_to_cam.translation[:, None]])
    lines.append("Tr: " + " ".join(f"{v:.12e}" for v in tr.ravel()))
    return "\n".join(lines) + "\n"


def parse_poses(text: str) -> Trajectory:
    """Parse a KITTI pose file: one 3x4 row-major camera-to-world per line.

    Rotation blocks with orthonormality drift beyond 1e-6 are re-orthonormalized
    (and a warning is emitted); beyond 1e-3 the file is rejected.
    """
    poses = []
    fixed = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        values = line.split()
        if len(values) != 12:
            raise CalibParseError(f"expected 12 numbers per pose, got {len(values)}", line_no)
        try:
            numbers = [float(v) for v in values]
        except ValueError as e:
            raise CalibParseError(f"non-numeric pose entry: {e}", line_no) from None
        m = np.array(numbers).reshape(3, 4)
        r = m[:, :3]
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > 1e-3:
            raise CalibParseError(f"rotation drift {drift:.2e} too large", line_no)
        if drift > 1e-6:
            u, _, vt = np.linalg.svd(r)
            r = u @ vt
            if np.linalg.det(r) < 0:
                u[:, -1] = -u[:, -1]
                r = u @ vt
            fixed += 1
        poses.append(TransformSE3(r, m[:, 3]))
    if fixed:
        warnings.warn(f"re-orthonormalized {fixed} rotation blocks while parsing poses")
    return Trajectory.from_poses(poses)


def format_poses(traj: Trajectory) -> str:
    """Inverse of parse_poses."""
    lines = []
    for t in traj.poses:
        m = np.hstack([t.rotation, t.translation[:, None]])
        lines.append(" ".join(f"{v:.12e}" for v in m.ravel()))
    return "\n".join(lines) + "\n"


def compute_speeds(traj: Trajectory, frame_rate: float = FRAME_RATE_HZ) -> np.ndarray:
    """Per-frame-gap speeds in km/h from consecutive relative displacements."""
    if len(traj.poses) < 2:
        raise ValueError("need at least two poses to compute speeds")
    speeds = []
    for a, b in zip(traj.poses[:-1], traj.poses[1:]):
        rel = compose(invert(a), b)
        speeds.append(np.linalg.norm(rel.translation) * frame_rate * MPS_TO_KMH)
    return np.array(speeds)


@dataclass(frozen=True)
class SnippetSample:
    """One 3-frame snippet: indices (center - k, center, center + k)."""

    center: int
    interval: int
    speed_kmh: float

    @property
    def indices(self):
        return (self.center - self.interval, self.center, self.center + self.interval)


@dataclass
class SequenceIndex:
    """File paths and calibration for one odometry sequence."""

    sequence_id: str
    image_paths: list
    scan_paths: list
    intrinsics: Intrinsics
    velo_to_cam: ExtrinsicCalib
    gt_poses: Trajectory = None
    frame_rate: float = FRAME_RATE_HZ

    def __post_init__(self):
        counts = {"images": len(self.image_paths)}
        if self.scan_paths:
            counts["scans"] = len(self.scan_paths)
        if self.gt_poses is not None:
            counts["poses"] = len(self.gt_poses.poses)
        if len(set(counts.values())) > 1:
            raise ValueError(f"inconsistent frame counts: {counts}")

    @property
    def n_frames(self):
        return len(self.image_paths)


def load_sequence(dataset_root, sequence_id: str, camera: int = 2) -> SequenceIndex:
    """Index one sequence from the standard directory layout.

    Camera 2 (left color) is the default image source. Image size is read
    from the first frame.
    """
    from PIL import Image

    root = Path(dataset_root)
    seq_dir = root / "sequences" / sequence_id
    image_dir = seq_dir / f"image_{camera}"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"missing image directory {image_dir}")
    image_paths = sorted(image_dir.glob("*.png"))
    if not image_paths:
        raise FileNotFoundError(f"no frames under {image_dir}")
    with Image.open(image_paths[0]) as im:
        image_size = im.size

    calib_path = seq_dir / "calib.txt"
    intrinsics_by_cam, extrinsic, projections = parse_calib(
        calib_path.read_text(), image_size)
    if camera not in intrinsics_by_cam:
        raise CalibParseError(f"calibration has no P{camera} entry", None)
    intrinsics = intrinsics_by_cam[camera]
    velo_to_cam = camera_extrinsic(extrinsic, projections[camera], intrinsics)

    scan_dir = seq_dir / "velodyne"
    scan_paths = sorted(scan_dir.glob("*.bin")) if scan_dir.is_dir() else []

    pose_path = root / "poses" / f"{sequence_id}.txt"
    gt_poses = parse_poses(pose_path.read_text()) if pose_path.is_file() else None

    return SequenceIndex(sequence_id=sequence_id, image_paths=image_paths,
                         scan_paths=scan_paths, intrinsics=intrinsics,
                         velo_to_cam=velo_to_cam, gt_poses=gt_poses)


def sample_snippets(seq: SequenceIndex, p_wide: float = 0.6,
                    min_speed_kmh: float = 10.0, seed: int = 0):
    """Draw 3-frame snippets with a widened sampling interval.

    For each eligible center frame the interval k = 2 is chosen with
    probability `p_wide`, else k = 1; snippets whose slower inter-frame
    vehicle speed falls below `min_speed_kmh` are dropped. Requires ground
    truth poses (speeds drive the filter; the losses never see them).
    """
    if seq.gt_poses is None:
        raise ValueError("snippet sampling needs ground-truth poses for the speed filter")
    n = seq.n_frames
    if n < 5:
        return []
    speeds = compute_speeds(seq.gt_poses, seq.frame_rate)
    rng = np.random.default_rng(seed)
    samples = []
    for center in range(2, n - 2):
        interval = 2 if rng.random() < p_wide else 1
        gap_speeds = []
        for lo, hi in ((center - interval, center), (center, center + interval)):
            gap = speeds[lo:hi]
            # mean relative displacement over the gap / gap time = vehicle speed
            gap_speeds.append(float(np.mean(gap)))
        snippet_speed = min(gap_speeds)
        if snippet_speed < min_speed_kmh:
            continue
        samples.append(SnippetSample(center=center, interval=interval,
                                     speed_kmh=snippet_speed))
    return samples


SPEED_BIN_WIDTH_KMH = 5.0
SPEED_BIN_MAX_KMH = 90.0


def speed_histogram(samples) -> np.ndarray:
    """Counts of effective snippet frame-to-frame speeds in 5 km/h bins.

    A widened interval doubles the displacement between the frames the
    snippet actually uses, so its effective speed is interval * vehicle
    speed; this is what makes the augmented distribution reach higher bins.
    """
    n_bins = int(SPEED_BIN_MAX_KMH / SPEED_BIN_WIDTH_KMH)
    counts = np.zeros(n_bins, dtype=np.int64)
    for s in samples:
        effective = s.speed_kmh * s.interval
        b = int(effective / SPEED_BIN_WIDTH_KMH)
        if 0 <= b < n_bins:
            counts[b] += 1
    return counts


def histogram_bins():
    edges = np.arange(0.0, SPEED_BIN_MAX_KMH + SPEED_BIN_WIDTH_KMH, SPEED_BIN_WIDTH_KMH)
    return edges[:-1], edges[1:]
