"""Per-snippet recovery of relative pose and dense depth by first-order
optimization of the self-supervision objective, in single-branch or siamese
(flip-consistent) mode.

A snippet is three frames: the middle one is the target, the outer two are
sources. The optimizer owns one pose per source plus the target's dense
depth, parameterized in log-space to keep it positive; moment-based adaptive
steps (Adam) with a halving learning-rate schedule drive them. The best
iterate seen is returned, so the final loss never exceeds the initial one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .errors import DivergenceError, EmptyMaskError
from .geometry import (FLIP_PIXEL_CENTER, Intrinsics, Pose6, flip_intrinsics)
from .imaging import D_MAX, D_MIN, DenseDepthMap, SparseDepthMap, hflip
from .losses import (LossBreakdown, LossWeights, adaptive_weight,
                     depth_fidelity_loss, flip_consistency_depth,
                     flip_consistency_pose, smoothness_loss, total_loss,
                     view_synthesis_loss, vlo_loss)

MODE_SINGLE = "single"
MODE_SIAMESE = "siamese"

DEPTH_INIT_INTERPOLATION = "sparse-interpolation"
DEPTH_INIT_CONSTANT = "constant"


@dataclass
class OptimizerConfig:
    """Step-size schedule and stopping rules for one snippet."""

    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 2e-4
    lr_halving_interval: int = 2000
    max_iters: int = 10000
    convergence_tol: float = 1e-9
    convergence_window: int = 50
    mode: str = MODE_SINGLE
    depth_init: str = DEPTH_INIT_INTERPOLATION
    adam_eps: float = 1e-8
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    pose_fc_mode: str = "component"
    phi_clamp: bool = True
    flip_convention: str = FLIP_PIXEL_CENTER
    # iterations at the start during which depth is held at its
    # initialization and only poses move; removes the per-pixel depth gauge
    # freedom while the poses are still far off
    pose_warmup_iters: int = 0
    # depth step scale relative to the pose learning rate once depth is
    # released; < 1 keeps depth on a slower timescale than the poses
    depth_lr_scale: float = 1.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"moment decays must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


@dataclass
class SnippetEstimate:
    """Optimization result for one snippet."""

    depth: DenseDepthMap
    poses: list
    loss_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def initialize_depth(sparse: SparseDepthMap, method: str = DEPTH_INIT_INTERPOLATION
                     ) -> DenseDepthMap:
    """Seed a dense depth map from sparse measurements.

    `constant` fills with the median valid depth; `sparse-interpolation`
    assigns each pixel the value of its nearest valid pixel.
    """
    if not sparse.mask.any():
        raise EmptyMaskError("cannot initialize depth from an empty sparse map")
    if method == DEPTH_INIT_CONSTANT:
        fill = float(np.median(sparse.values[sparse.mask]))
        values = np.full_like(sparse.values, fill)
    elif method == DEPTH_INIT_INTERPOLATION:
        if sparse.mask.all():
            values = sparse.values.copy()
        else:
            _, (iy, ix) = ndimage.distance_transform_edt(~sparse.mask, return_indices=True)
            values = sparse.values[iy, ix]
    else:
        raise ValueError(f"unknown depth init method {method!r}")
    return DenseDepthMap(np.clip(values, D_MIN, D_MAX))


class _Adam:
    """Standard bias-corrected first/second-moment steps."""

    def __init__(self, shape, cfg: OptimizerConfig):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.cfg = cfg

    def step(self, value, grad, lr):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1 ** self.t)
        v_hat = self.v / (1 - c.beta2 ** self.t)
        return value - lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def _split_snippet(images, sparse_depths):
    if len(images) != 3 or len(sparse_depths) != 3:
        raise ValueError(f"a snippet is 3 frames, got {len(images)} images "
                         f"and {len(sparse_depths)} sparse maps")
    target = images[1]
    sources = [images[0], images[2]]
    target_sparse = sparse_depths[1]
    if not target_sparse.mask.any():
        raise EmptyMaskError("target sparse map is empty")
    return target, sources, target_sparse


class _Branch:
    """Variables and loss assembly for one VLO branch (one view of the data)."""

    def __init__(self, target, sources, sparse, intrinsics, cfg, weights):
        self.target = target.values
        self.sources = [s.values for s in sources]
        self.sparse = sparse
        self.intrinsics = intrinsics
        self.weights = weights
        self.log_depth = np.log(initialize_depth(sparse, cfg.depth_init).values)
        self.pose_values = [np.zeros(6), np.zeros(6)]
        self.adam_depth = _Adam(self.log_depth.shape, cfg)
        self.adam_poses = [_Adam((6,), cfg) for _ in range(2)]

    def variables(self, tape, depth_is_variable=True):
        # during pose warmup the depth enters as a constant, which keeps the
        # whole depth-gradient subgraph off the tape
        if depth_is_variable:
            self.var_log_depth = tape.variable(self.log_depth)
        else:
            self.var_log_depth = None
        self.var_poses = [tape.variable(p) for p in self.pose_values]
        return self

    def losses(self):
        depth = ad.exp(self.var_log_depth if self.var_log_depth is not None
                       else self.log_depth)
        vs = view_synthesis_loss(self.target, self.sources, depth, self.var_poses,
                                 self.intrinsics, self.weights.alpha_s)
        df = depth_fidelity_loss(self.sparse, depth)
        ds = smoothness_loss(self.target, depth)
        vlo = vlo_loss(vs, df, ds, self.weights)
        return vs, df, ds, vlo, depth

    def apply_step(self, grads, lr, depth_lr):
        if self.var_log_depth is not None:
            self.log_depth = np.clip(
                self.adam_depth.step(self.log_depth, grads[self.var_log_depth], depth_lr),
                np.log(D_MIN), np.log(D_MAX))
        for i in range(2):
            self.pose_values[i] = self.adam_poses[i].step(
                self.pose_values[i], grads[self.var_poses[i]], lr)

    def snapshot(self):
        return (self.log_depth.copy(), [p.copy() for p in self.pose_values])

    def estimate(self, snapshot, history, iterations, converged):
        log_depth, poses = snapshot
        return SnippetEstimate(
            depth=DenseDepthMap(np.exp(log_depth)),
            poses=[Pose6.from_array(p) for p in poses],
            loss_history=history,
            iterations=iterations,
            converged=converged,
        )


def _run(branches, cfg: OptimizerConfig, weights: LossWeights, siamese: bool):
    histories = [[] for _ in branches]
    best_loss = np.inf
    best_snapshots = None
    initial_loss = None
    divergent_streak = 0
    converged = False
    iterations = 0

    for iteration in range(cfg.max_iters + 1):
        lr = cfg.lr * 0.5 ** (iteration // cfg.lr_halving_interval)
        depth_is_variable = iteration >= cfg.pose_warmup_iters
        tape = ad.Tape()
        for b in branches:
            b.variables(tape, depth_is_variable)
        branch_terms = [b.losses() for b in branches]

        if siamese:
            (vs_a, df_a, ds_a, vlo_a, depth_a) = branch_terms[0]
            (vs_b, df_b, ds_b, vlo_b, depth_b) = branch_terms[1]
            mean_vs = 0.5 * (float(ad.value_of(vs_a)) + float(ad.value_of(vs_b)))
            phi = adaptive_weight(mean_vs, weights.lambda_fc, weights.sigma,
                                  clamp=cfg.phi_clamp)
            dfc = flip_consistency_depth(depth_a, depth_b)
            pfc_terms = [
                flip_consistency_pose(branches[0].var_poses[i], branches[1].var_poses[i],
                                      weights.alpha_r, cfg.pose_fc_mode)
                for i in range(2)
            ]
            pfc = pfc_terms[0] + pfc_terms[1]
            root = total_loss(vlo_a, vlo_b, dfc, pfc, phi)
            shared = dict(dfc=float(ad.value_of(dfc)), pfc=float(ad.value_of(pfc)),
                          total=float(ad.value_of(root)), phi=phi)
            for terms, history in zip(branch_terms, histories):
                vs, df, ds, vlo, _ = terms
                history.append(LossBreakdown(
                    vs=float(ad.value_of(vs)), df=float(ad.value_of(df)),
                    ds=float(ad.value_of(ds)), vlo=float(ad.value_of(vlo)), **shared))
        else:
            vs, df, ds, vlo, _ = branch_terms[0]
            root = vlo
            histories[0].append(LossBreakdown(
                vs=float(ad.value_of(vs)), df=float(ad.value_of(df)),
                ds=float(ad.value_of(ds)), vlo=float(ad.value_of(vlo)),
                total=float(ad.value_of(vlo))))

        loss_now = float(ad.value_of(root))
        if initial_loss is None:
            initial_loss = loss_now
        if loss_now < best_loss:
            best_loss = loss_now
            best_snapshots = [b.snapshot() for b in branches]
        iterations = iteration

        if loss_now > cfg.divergence_factor * max(initial_loss, 1e-30):
            divergent_streak += 1
            if divergent_streak >= cfg.divergence_patience:
                raise DivergenceError(
                    f"loss {loss_now:.4g} exceeded {cfg.divergence_factor}x the initial "
                    f"{initial_loss:.4g} for {divergent_streak} iterations",
                    history=histories[0])
        else:
            divergent_streak = 0

        window = cfg.convergence_window
        hist = histories[0]
        if len(hist) > window:
            reference = hist[-1 - window].total
            if abs(hist[-1].total - reference) < cfg.convergence_tol * max(abs(reference), 1e-30):
                converged = True
                break
        if iteration == cfg.max_iters:
            break

        grads = tape.backward(root)
        for b in branches:
            b.apply_step(grads, lr, lr * cfg.depth_lr_scale)

    return best_snapshots, histories, iterations, converged


def optimize_snippet(images, sparse_depths, intrinsics: Intrinsics,
                     cfg: OptimizerConfig = None, weights: LossWeights = None,
                     initial_depth: DenseDepthMap = None) -> SnippetEstimate:
    """Recover the two source poses and the target's dense depth for one
    3-frame snippet by minimizing the single-branch objective."""
    cfg = cfg or OptimizerConfig()
    weights = weights or LossWeights()
    target, sources, sparse = _split_snippet(images, sparse_depths)
    branch = _Branch(target, sources, sparse, intrinsics, cfg, weights)
    if initial_depth is not None:
        branch.log_depth = np.log(initial_depth.values)
    snapshots, histories, iterations, converged = _run([branch], cfg, weights, siamese=False)
    return branch.estimate(snapshots[0], histories[0], iterations, converged)


def optimize_snippet_siamese(images, sparse_depths, intrinsics: Intrinsics,
                             cfg: OptimizerConfig = None, weights: LossWeights = None):
    """Jointly optimize the original and the horizontally flipped snippet
    under the flip-consistency objective. Returns (original, flipped)
    estimates; the flipped branch is expressed in the flipped frame."""
    cfg = cfg or OptimizerConfig()
    weights = weights or LossWeights()
    target, sources, sparse = _split_snippet(images, sparse_depths)

    flipped_images = [hflip(img) for img in images]
    flipped_sparse = [hflip(s) for s in sparse_depths]
    target_f, sources_f, sparse_f = _split_snippet(flipped_images, flipped_sparse)
    intrinsics_f = flip_intrinsics(intrinsics, cfg.flip_convention)

    branch = _Branch(target, sources, sparse, intrinsics, cfg, weights)
    branch_f = _Branch(target_f, sources_f, sparse_f, intrinsics_f, cfg, weights)
    snapshots, histories, iterations, converged = _run(
        [branch, branch_f], cfg, weights, siamese=True)
    est = branch.estimate(snapshots[0], histories[0], iterations, converged)
    est_f = branch_f.estimate(snapshots[1], histories[1], iterations, converged)
    return est, est_f
