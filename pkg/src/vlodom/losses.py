"""The self-supervision objective: view synthesis, depth fidelity, image-guided
smoothness, the two flip-consistency terms, the per-branch combination and the
adaptively weighted total.

All per-pixel terms are means over valid pixels so the balance weights do not
depend on image resolution. Each loss accepts plain grids (returns a float) or
autodiff Vars for depth/pose (returns a Var); images are always constants.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import math
import numpy as np

from . import autodiff as ad
from .errors import DegenerateWarpError, EmptyMaskError
from .geometry import Intrinsics
from .imaging import (ImageGrid, SparseDepthMap, gradient_x, gradient_y,
                      ssim_values, warp_values)

_FLIP_SIGNS = np.array([-1.0, 1.0, 1.0, 1.0, -1.0, -1.0])


@dataclass(frozen=True)
class LossWeights:
    """Balance factors of the objective; defaults are the working values."""

    lambda_vs: float = 2.0
    lambda_df: float = 0.2
    lambda_ds: float = 40.0
    lambda_fc: float = 2.5
    alpha_s: float = 0.85
    alpha_r: float = 2.0
    sigma: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar values of every term for one evaluation of the objective."""

    vs: float = 0.0
    df: float = 0.0
    ds: float = 0.0
    dfc: float = 0.0
    pfc: float = 0.0
    vlo: float = 0.0
    total: float = 0.0
    phi: float = 0.0

    def to_record(self) -> str:
        return " ".join(f"{f.name}={getattr(self, f.name):.10g}" for f in fields(self))

    @classmethod
    def from_record(cls, line: str) -> "LossBreakdown":
        kv = {}
        for token in line.split():
            name, _, value = token.partition("=")
            if not _:
                raise ValueError(f"malformed loss record token {token!r}")
            kv[name] = float(value)
        return cls(**kv)


def _grid(x):
    """Underlying array/Var of an imaging container or raw value."""
    if hasattr(x, "values") and not isinstance(x, ad.Var):
        return x.values
    return x


def _pose_vec(p):
    if hasattr(p, "as_array"):
        return p.as_array()
    return p


def _masked_mean(values, mask):
    """Mean of `values` over mask-true pixels; channel axes count per entry."""
    v = ad.value_of(values)
    if v.ndim == 3:
        count = float(mask.sum()) * v.shape[2]
        mask = mask[:, :, None]
    else:
        count = float(mask.sum())
    masked = ad.where(mask, values, 0.0)
    return ad.total(masked) / count


def view_synthesis_loss(target, sources, depth, poses, intrinsics: Intrinsics,
                        alpha_s: float = 0.85, valid_masks=None, diagnostics=None):
    """Photometric difference between the target and each warped source:
    (1 - alpha_s) * L1 + alpha_s * (1 - SSIM), averaged over valid pixels and
    summed over source views.

    `valid_masks` (one boolean array per source, or None entries) freezes the
    averaging masks, which gradient checks need; `diagnostics`, when a dict,
    receives per-source warp coordinates and masks.
    """
    target_values = np.asarray(_grid(target), dtype=np.float64)
    if target_values.ndim == 2:
        target_values = target_values[:, :, None]
    if len(sources) != len(poses):
        raise ValueError(f"{len(sources)} sources but {len(poses)} poses")
    depth = _grid(depth)

    loss = None
    for i, (source, pose) in enumerate(zip(sources, poses)):
        source_values = np.asarray(_grid(source), dtype=np.float64)
        if source_values.ndim == 2:
            source_values = source_values[:, :, None]
        if source_values.shape != target_values.shape:
            raise ValueError(
                f"source {i} shape {source_values.shape} != target {target_values.shape}")
        override = valid_masks[i] if valid_masks is not None else None
        warped, valid, coords = warp_values(source_values, depth, _pose_vec(pose),
                                            intrinsics, valid_override=override)
        if diagnostics is not None:
            diagnostics.setdefault("coords", []).append(
                (ad.value_of(coords[0]), ad.value_of(coords[1])))
            diagnostics.setdefault("valid", []).append(valid)
            diagnostics.setdefault("warped", []).append(ad.value_of(warped))
        if not valid.any():
            raise DegenerateWarpError(f"warp of source {i} left no valid pixel")

        # zero the target where the warp is invalid so the SSIM windows of
        # valid pixels compare like with like near mask boundaries
        masked_target = np.where(valid[:, :, None], target_values, 0.0)
        l1 = _masked_mean(ad.absolute(warped - masked_target), valid)
        ssim_map = ssim_values(masked_target, warped)
        dssim = _masked_mean(1.0 - ssim_map, valid)
        term = (1.0 - alpha_s) * l1 + alpha_s * dssim
        loss = term if loss is None else loss + term
    return _as_scalar(loss)


def depth_fidelity_loss(sparse: SparseDepthMap, pred):
    """Mean absolute deviation from the sparse measurements at valid pixels."""
    mask = sparse.mask
    if not mask.any():
        raise EmptyMaskError("sparse map has no valid pixel")
    pred = _grid(pred)
    if ad.value_of(pred).shape != sparse.values.shape:
        raise ValueError(
            f"prediction shape {ad.value_of(pred).shape} != sparse {sparse.values.shape}")
    diff = ad.absolute(ad.sub(sparse.values, pred))
    return _as_scalar(_masked_mean(diff, mask))


def smoothness_loss(img, depth):
    """Image-guided depth smoothness: depth gradients are penalized except
    across image edges, exp(-|grad I|) * |grad D|, averaged over pixels."""
    img_values = np.asarray(_grid(img), dtype=np.float64)
    if img_values.ndim == 2:
        img_values = img_values[:, :, None]
    depth = _grid(depth)
    if ad.value_of(depth).shape != img_values.shape[:2]:
        raise ValueError(
            f"depth shape {ad.value_of(depth).shape} != image {img_values.shape[:2]}")
    wx = np.exp(-np.abs(gradient_x(img_values)).mean(axis=2))
    wy = np.exp(-np.abs(gradient_y(img_values)).mean(axis=2))
    term = wx * ad.absolute(gradient_x(depth)) + wy * ad.absolute(gradient_y(depth))
    return _as_scalar(ad.mean(term))


def flip_consistency_depth(pred, pred_flipped):
    """Mean absolute difference between the mirrored prediction and the
    prediction on mirrored inputs."""
    pred = _grid(pred)
    pred_flipped = _grid(pred_flipped)
    if ad.value_of(pred).shape != ad.value_of(pred_flipped).shape:
        raise ValueError("flip-consistency inputs must share a shape")
    return _as_scalar(ad.mean(ad.absolute(ad.flip_columns(pred) - pred_flipped)))


POSE_FC_COMPONENT = "component"
POSE_FC_LITERAL = "literal"


def flip_consistency_pose(pose, pose_flipped, alpha_r: float = 2.0,
                          mode: str = POSE_FC_COMPONENT):
    """Disagreement between a pose and the sign-adjusted pose of the mirrored
    problem.

    `component` applies the absolute value per component before summing;
    `literal` sums the signed residuals inside a single absolute value per
    block (translation, rotation), which permits cancellation.
    """
    p = _pose_vec(pose)
    pf = _pose_vec(pose_flipped)
    residual = p - ad.mul(_FLIP_SIGNS, pf)
    if mode == POSE_FC_COMPONENT:
        r = ad.absolute(residual)
        t_term = r[0] + r[1] + r[2]
        r_term = r[3] + r[4] + r[5]
    elif mode == POSE_FC_LITERAL:
        t_term = ad.absolute(residual[0] + residual[1] + residual[2])
        r_term = ad.absolute(residual[3] + residual[4] + residual[5])
    else:
        raise ValueError(f"unknown pose flip-consistency mode {mode!r}")
    return _as_scalar(t_term + alpha_r * r_term)


def vlo_loss(vs, df, ds, weights: LossWeights):
    """Weighted sum of one branch's view-synthesis, fidelity and smoothness."""
    return _as_scalar(weights.lambda_vs * vs + weights.lambda_df * df
                      + weights.lambda_ds * ds)


def adaptive_weight(vs_value: float, lambda_fc: float = 2.5, sigma: float = 0.2,
                    clamp: bool = True) -> float:
    """Consistency-loss schedule lambda_fc * exp(-L_vs / sigma).

    The published scaling exceeds 1 for small losses, so by default the
    weight is clamped to 1; pass clamp=False for the literal value.
    """
    if vs_value < 0:
        raise ValueError(f"view synthesis loss must be >= 0, got {vs_value}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    phi = lambda_fc * math.exp(-vs_value / sigma)
    return min(phi, 1.0) if clamp else phi


def total_loss(vlo, vlo_flipped, dfc, pfc, phi: float):
    """Siamese objective: both branch losses plus the weighted consistency
    terms. `phi` is a plain number; no gradient flows through the schedule."""
    return _as_scalar(vlo + vlo_flipped + phi * (dfc + pfc))


def _as_scalar(x):
    if isinstance(x, ad.Var):
        return x
    return float(x)


def fd_coordinate_margin(depth, pose, intrinsics: Intrinsics,
                         pose_step: float, depth_step: float) -> float:
    """Largest warp-coordinate displacement any finite-difference step can
    cause, probed by applying each step. Kink exclusion margins must exceed
    this or central differences straddle bilinear kernel breaks."""
    from .imaging import warp_coordinates

    depth = np.asarray(_grid(depth), dtype=np.float64)
    pose = np.asarray(_pose_vec(pose), dtype=np.float64)
    us0, vs0, _, _ = warp_coordinates(depth, pose, intrinsics)
    shift = 0.0
    for axis in range(6):
        for sign in (1.0, -1.0):
            p = pose.copy()
            p[axis] += sign * pose_step
            us, vs, _, _ = warp_coordinates(depth, p, intrinsics)
            shift = max(shift, np.abs(us - us0).max(), np.abs(vs - vs0).max())
    for sign in (1.0, -1.0):
        us, vs, _, _ = warp_coordinates(depth + sign * depth_step, pose, intrinsics)
        shift = max(shift, np.abs(us - us0).max(), np.abs(vs - vs0).max())
    return float(shift)


def kink_free_mask(target, source, depth, pose, intrinsics: Intrinsics,
                   coord_margin: float = 1e-3, residual_margin: float = 1e-3,
                   pose_step: float = None, depth_step: float = None):
    """Valid-pixel mask for finite-difference checks of the photometric loss.

    Excludes pixels whose warp coordinate sits within `coord_margin` of an
    integer grid line (bilinear kernel kink) and pixels whose photometric
    residual in any channel is within `residual_margin` of zero (absolute
    value kink). When the finite-difference step sizes are given, both
    margins are widened to twice the coordinate/value displacement those
    steps cause, so no central difference straddles a kink. The returned
    mask is frozen by passing it back through `valid_masks`.
    """
    target_values = np.asarray(_grid(target), dtype=np.float64)
    if target_values.ndim == 2:
        target_values = target_values[:, :, None]
    source_values = np.asarray(_grid(source), dtype=np.float64)
    if source_values.ndim == 2:
        source_values = source_values[:, :, None]
    if pose_step is not None and depth_step is not None:
        probed = fd_coordinate_margin(depth, pose, intrinsics, pose_step, depth_step)
        coord_margin = max(coord_margin, 2.0 * probed)
        # within a bilinear cell the intensity slope of a [0, 1] image is at
        # most 1 per pixel, so residuals move by at most the coordinate shift
        residual_margin = max(residual_margin, 2.0 * probed)
    warped, valid, (us, vs) = warp_values(source_values, np.asarray(_grid(depth)),
                                          _pose_vec(pose), intrinsics)
    us, vs = ad.value_of(us), ad.value_of(vs)
    frac_u = np.abs(us - np.round(us))
    frac_v = np.abs(vs - np.round(vs))
    away_from_kinks = (frac_u > coord_margin) & (frac_v > coord_margin)
    residual = np.abs(warped - target_values)
    away_from_zero = (residual > residual_margin).all(axis=2)
    return valid & away_from_kinks & away_from_zero
