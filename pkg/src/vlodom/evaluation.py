"""Trajectory accumulation, monocular scale recovery and the KITTI-style
sub-sequence error metrics (translational % and rotational deg/100m), with
the per-axis error decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (Pose6, TransformSE3, compose, invert, pose_to_transform,
                       transform_to_pose)

EVAL_LENGTHS_M = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
EVAL_STRIDE_FRAMES = 10


@dataclass(frozen=True)
class Trajectory:
    """World poses per frame plus the cumulative path length in meters."""

    poses: tuple
    path_lengths: np.ndarray

    @classmethod
    def from_poses(cls, poses) -> "Trajectory":
        poses = tuple(poses)
        lengths = np.zeros(len(poses))
        for i in range(1, len(poses)):
            step = poses[i].translation - poses[i - 1].translation
            lengths[i] = lengths[i - 1] + float(np.linalg.norm(step))
        return cls(poses=poses, path_lengths=lengths)

    def __len__(self):
        return len(self.poses)

    @property
    def total_length(self) -> float:
        return float(self.path_lengths[-1]) if len(self.poses) else 0.0


def accumulate(relative_poses) -> Trajectory:
    """Chain consecutive-frame relative poses into world poses.

    Each entry maps frame t into frame t+1 coordinates (target-to-source),
    so the world pose advances by its inverse; the first world pose is the
    identity.
    """
    world = [TransformSE3.identity()]
    for p in relative_poses:
        step = invert(pose_to_transform(p))
        world.append(compose(world[-1], step))
    return Trajectory.from_poses(world)


def decompose(traj: Trajectory):
    """Consecutive-frame relative poses (target-to-source) of a trajectory;
    inverse of `accumulate`."""
    rel = []
    for a, b in zip(traj.poses[:-1], traj.poses[1:]):
        rel.append(transform_to_pose(invert(compose(invert(a), b))))
    return rel


SCALE_PER_SNIPPET = "per-snippet"
SCALE_GLOBAL = "global"


def scale_align(est: Trajectory, gt: Trajectory, mode: str = SCALE_PER_SNIPPET) -> Trajectory:
    """Recover monocular scale against the reference trajectory.

    `per-snippet` rescales every relative translation to the reference norm;
    `global` applies one least-squares scale to all relative translations.
    Rotations are untouched.
    """
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    rel_est = [compose(invert(a), b) for a, b in zip(est.poses[:-1], est.poses[1:])]
    rel_gt = [compose(invert(a), b) for a, b in zip(gt.poses[:-1], gt.poses[1:])]

    if mode == SCALE_PER_SNIPPET:
        scales = []
        for e, g in zip(rel_est, rel_gt):
            norm_e = float(np.linalg.norm(e.translation))
            norm_g = float(np.linalg.norm(g.translation))
            scales.append(norm_g / norm_e if norm_e > 1e-9 else 1.0)
    elif mode == SCALE_GLOBAL:
        num = sum(float(e.translation @ g.translation) for e, g in zip(rel_est, rel_gt))
        den = sum(float(e.translation @ e.translation) for e in rel_est)
        s = num / den if den > 1e-18 else 1.0
        scales = [s] * len(rel_est)
    else:
        raise ValueError(f"unknown scale mode {mode!r}")

    world = [est.poses[0]]
    for rel, s in zip(rel_est, scales):
        world.append(compose(world[-1], TransformSE3(rel.rotation, rel.translation * s)))
    return Trajectory.from_poses(world)


@dataclass(frozen=True)
class MetricReport:
    """Averaged sub-sequence errors in the official units."""

    t_rel_percent: float
    r_rel_deg_per_100m: float
    n_subsequences: int
    per_length: dict = field(default_factory=dict)

    @property
    def is_empty(self):
        return self.n_subsequences == 0


def _rotation_angle(r: np.ndarray) -> float:
    return math.acos(min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0)))


def _subsequence_errors(est: Trajectory, gt: Trajectory, lengths=EVAL_LENGTHS_M,
                        stride: int = EVAL_STRIDE_FRAMES):
    """Relative-pose error transforms for every (start frame, length)."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    dist = gt.path_lengths
    n = len(gt)
    out = []
    for start in range(0, n, stride):
        ends = np.searchsorted(dist, dist[start] + np.asarray(lengths))
        for length, end in zip(lengths, ends):
            if end >= n:
                continue
            rel_gt = compose(invert(gt.poses[start]), gt.poses[end])
            rel_est = compose(invert(est.poses[start]), est.poses[end])
            error = compose(invert(rel_gt), rel_est)
            out.append((start, int(end), float(length), error))
    return out


def kitti_metrics(est: Trajectory, gt: Trajectory, lengths=EVAL_LENGTHS_M,
                  stride: int = EVAL_STRIDE_FRAMES) -> MetricReport:
    """Average translational (%) and rotational (deg/100m) error over all
    sub-sequences of the standard lengths.

    Start frames advance by `stride`; a sub-sequence of nominal length L runs
    to the first frame at cumulative reference distance >= L and is skipped
    when the trajectory ends first. Errors are normalized by the nominal
    length. A reference shorter than the smallest length yields an empty
    report.
    """
    errors = _subsequence_errors(est, gt, lengths, stride)
    if not errors:
        return MetricReport(0.0, 0.0, 0)
    per_length = {length: [] for length in lengths}
    t_all, r_all = [], []
    for _, _, length, e in errors:
        t_err = float(np.linalg.norm(e.translation)) / length
        r_err = _rotation_angle(e.rotation) / length
        t_all.append(t_err)
        r_all.append(r_err)
        per_length[length].append((t_err, r_err))
    per_length_avg = {}
    for length, entries in per_length.items():
        if entries:
            ts, rs = zip(*entries)
            per_length_avg[length] = (float(np.mean(ts)) * 100.0,
                                      float(np.mean(rs)) * 180.0 / math.pi * 100.0)
    return MetricReport(
        t_rel_percent=float(np.mean(t_all)) * 100.0,
        r_rel_deg_per_100m=float(np.mean(r_all)) * 180.0 / math.pi * 100.0,
        n_subsequences=len(errors),
        per_length=per_length_avg,
    )


def sequence_mean(reports) -> MetricReport:
    """Simple (sequence-weighted) mean of several non-empty reports."""
    reports = [r for r in reports if not r.is_empty]
    if not reports:
        return MetricReport(0.0, 0.0, 0)
    return MetricReport(
        t_rel_percent=float(np.mean([r.t_rel_percent for r in reports])),
        r_rel_deg_per_100m=float(np.mean([r.r_rel_deg_per_100m for r in reports])),
        n_subsequences=sum(r.n_subsequences for r in reports),
    )


def per_axis_errors(est: Trajectory, gt: Trajectory, lengths=EVAL_LENGTHS_M,
                    stride: int = EVAL_STRIDE_FRAMES):
    """Per-axis decomposition of the sub-sequence errors.

    Returns {length: {"tx": ..., "ty": ..., "tz": ..., "rx": ..., "ry": ...,
    "rz": ...}} with mean absolute translation (m) and rotation (rad)
    components of the error transform; rx/ry/rz are pitch/yaw/roll about the
    camera axes.
    """
    errors = _subsequence_errors(est, gt, lengths, stride)
    buckets = {length: [] for length in lengths}
    for _, _, length, e in errors:
        p = transform_to_pose(e)
        buckets[length].append(np.abs(p.as_array()))
    out = {}
    for length, entries in buckets.items():
        if not entries:
            continue
        mean = np.mean(entries, axis=0)
        out[length] = {
            "tx": float(mean[0]), "ty": float(mean[1]), "tz": float(mean[2]),
            "rx": float(mean[3]), "ry": float(mean[4]), "rz": float(mean[5]),
        }
    return out


def format_metric_table(report: MetricReport, title: str = "") -> str:
    """Aligned text table of a metric report."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'length_m':>10} {'t_rel_%':>10} {'r_rel_deg/100m':>16}")
    for length in sorted(report.per_length):
        t, r = report.per_length[length]
        lines.append(f"{length:>10.0f} {t:>10.4f} {r:>16.4f}")
    lines.append(f"{'mean':>10} {report.t_rel_percent:>10.4f} "
                 f"{report.r_rel_deg_per_100m:>16.4f}")
    lines.append(f"subsequences: {report.n_subsequences}")
    return "\n".join(lines) + "\n"
