"""Image and depth grid containers plus the sampling machinery built on them:
bilinear lookup, inverse warping, horizontal flips, local gradients and SSIM.

The array-level helpers (`warp_values`, `ssim_values`, `gradient_x`, ...)
accept either plain ndarrays or autodiff `Var`s for the quantities being
optimized (depth, pose) and are shared by the public grid API and the loss
stack. Images are always constants: intensities in [0, 1], pixel centers at
integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import singledispatch

import numpy as np
from PIL import Image

from . import autodiff as ad
from .geometry import Intrinsics, Pose6

# depth clamp used across the package; KITTI lidar range
D_MIN = 0.1
D_MAX = 80.0


def _validate_2d(values, name):
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-d grid, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ImageGrid:
    """Intensity grid, (H, W, C) with C in {1, 3} and values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W) or (H, W, 1|3), got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"image dimensions must be positive, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError(f"intensities must lie in [0, 1], got [{v.min()}, {v.max()}]")
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class DenseDepthMap:
    """Dense depth grid in meters, clamped to [D_MIN, D_MAX]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        _validate_2d(v, "depth map")
        if v.min() < D_MIN or v.max() > D_MAX:
            raise ValueError(
                f"dense depth must lie in [{D_MIN}, {D_MAX}], got [{v.min()}, {v.max()}]")
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class SparseDepthMap:
    """Sparse depth grid: zero marks missing, positive values are meters.

    The validity mask is derived from the values (mask true iff value > 0).
    """

    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        _validate_2d(v, "sparse depth map")
        if v.min() < 0.0:
            raise ValueError("sparse depth values must be non-negative")
        m = v > 0.0
        if np.any(v[m] > D_MAX):
            raise ValueError(f"valid sparse depths must be <= {D_MAX}, got {v[m].max()}")
        if self.mask is not None and not np.array_equal(np.asarray(self.mask, bool), m):
            raise ValueError("explicit mask inconsistent with values > 0")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def valid_count(self):
        return int(self.mask.sum())


# ---------------------------------------------------------------------------
# differentiable warp core
# ---------------------------------------------------------------------------

def pose_rotation_terms(pose):
    """Rows of Rz(rz)Ry(ry)Rx(rx) as scalar expressions of a (6,) pose value.

    Works for Var or ndarray poses; returns a 3x3 nested tuple plus the
    translation triple.
    """
    tx, ty, tz = pose[0], pose[1], pose[2]
    sx, cx = ad.sin(pose[3]), ad.cos(pose[3])
    sy, cy = ad.sin(pose[4]), ad.cos(pose[4])
    sz, cz = ad.sin(pose[5]), ad.cos(pose[5])
    r = (
        (cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx),
        (sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx),
        (-1.0 * sy, cy * sx, cy * cx),
    )
    return r, (tx, ty, tz)


_WARP_GRID_CACHE = {}


def _warp_grids(intrinsics, h, w):
    """Constant per-pixel coefficient grids for `warp_coordinates`."""
    key = (intrinsics, h, w)
    grids = _WARP_GRID_CACHE.get(key)
    if grids is None:
        k = intrinsics
        ug, vg = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        a = ug - k.cx
        b = vg - k.cy
        grids = (a, b, b * (k.fx / k.fy), a * (k.fy / k.fx), a / k.fx, b / k.fy)
        _WARP_GRID_CACHE[key] = grids
    return grids


def warp_coordinates(depth, pose, intrinsics, min_depth=1e-6):
    """Source-view pixel coordinates for every target pixel.

    `depth` is (H, W), `pose` a (6,) vector; both may be Vars. Returns
    (us, vs, zs, in_front) where zs is the transformed depth and in_front a
    plain boolean array (zs > min_depth). The formulation keeps an identity
    pose bit-exact: every pose-dependent term is an exact zero then.
    """
    k = intrinsics
    h, w = ad.value_of(depth).shape
    a, b, b_scaled, a_scaled, a_over_fx, b_over_fy = _warp_grids(intrinsics, h, w)

    rows, (tx, ty, tz) = pose_rotation_terms(pose)
    (r00, r01, r02), (r10, r11, r12), (r20, r21, r22) = rows

    inv_d = ad.div(1.0, depth)
    # ratios scaled so that u = cx + num_u / den; at identity num_u == a and
    # den == 1 exactly
    num_u = ad.projection_row(r00, a, r01, b_scaled, r02 * k.fx, tx * k.fx, inv_d)
    num_v = ad.projection_row(r10, a_scaled, r11, b, r12 * k.fy, ty * k.fy, inv_d)
    den = ad.projection_row(r20, a_over_fx, r21, b_over_fy, r22, tz, inv_d)

    zs = depth * den
    in_front = ad.value_of(zs) > min_depth
    safe_den = ad.where(in_front, den, 1.0)
    us = k.cx + num_u / safe_den
    vs = k.cy + num_v / safe_den
    return us, vs, zs, in_front


def bilinear_weights(us, vs, height, width):
    """Corner indices and blend weights for sampling at (us, vs).

    The base corner is clamped to [0, W-2] x [0, H-2] so coordinates on the
    far boundary (u = W-1) sample the edge pixel exactly; validity covers
    exactly the coordinates inside [0, W-1] x [0, H-1].
    """
    us_v, vs_v = ad.value_of(us), ad.value_of(vs)
    u0 = np.clip(np.floor(us_v), 0, max(width - 2, 0)).astype(np.int64)
    v0 = np.clip(np.floor(vs_v), 0, max(height - 2, 0)).astype(np.int64)
    in_bounds = (us_v >= 0.0) & (us_v <= width - 1) & (vs_v >= 0.0) & (vs_v <= height - 1)
    wu = us - u0.astype(np.float64)
    wv = vs - v0.astype(np.float64)
    return u0, v0, wu, wv, in_bounds


def warp_values(src_values, depth, pose, intrinsics, min_depth=1e-6,
                valid_override=None):
    """Inverse-warp a constant source image to the target frame.

    `src_values` is a constant (H, W, C) array; `depth` (H, W) and `pose`
    (6,) may be Vars. Returns (warped, valid, (us, vs)) where warped is
    (H, W, C) with invalid pixels zeroed and valid is a plain boolean mask.
    `valid_override` freezes the mask (used by gradient checks); the
    geometric front/in-bounds test still guards the arithmetic.
    """
    src_values = np.asarray(src_values, dtype=np.float64)
    h, w, _ = src_values.shape
    us, vs, _, in_front = warp_coordinates(depth, pose, intrinsics, min_depth)
    u0, v0, wu, wv, in_bounds = bilinear_weights(us, vs, h, w)
    valid = in_front & in_bounds if valid_override is None else np.asarray(valid_override, bool)

    c00 = src_values[v0, u0]
    c10 = src_values[v0, u0 + 1]
    c01 = src_values[v0 + 1, u0]
    c11 = src_values[v0 + 1, u0 + 1]

    blend = ad.bilinear_blend(wu, wv, c00, c10, c01, c11)
    warped = ad.where(valid[:, :, None], blend, 0.0)
    return warped, valid, (us, vs)


def gradient_x(values):
    """Forward difference along width; last column zero."""
    v = ad.value_of(values)
    w = v.shape[1]
    if isinstance(values, ad.Var):
        mask = np.zeros(v.shape, dtype=bool)
        mask[:, : w - 1] = True
        return ad.where(mask, ad.shift2d(values, 0, -1) - values, 0.0)
    out = np.zeros_like(v)
    out[:, : w - 1] = v[:, 1:] - v[:, : w - 1]
    return out


def gradient_y(values):
    """Forward difference along height; last row zero."""
    v = ad.value_of(values)
    h = v.shape[0]
    if isinstance(values, ad.Var):
        mask = np.zeros(v.shape, dtype=bool)
        mask[: h - 1] = True
        return ad.where(mask, ad.shift2d(values, -1, 0) - values, 0.0)
    out = np.zeros_like(v)
    out[: h - 1] = v[1:] - v[: h - 1]
    return out


_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _ssim_fused(a_values, b):
    """SSIM map with a constant reference image, as one recorded op.

    Forward and backward are hand-fused over the windowed statistics; the
    backward pushes gradients to `b` only (`a_values` is a constant).
    """
    from vlodom.autodiff import _box3_sum_raw, box3_count

    b_values = ad.value_of(b)
    h, w, channels = a_values.shape
    n = box3_count(h, w)

    acc = None
    saved = []
    for c in range(channels):
        ac = a_values[..., c]
        bc = b_values[..., c]
        mu_a = _box3_sum_raw(ac) / n
        mu_b = _box3_sum_raw(bc) / n
        var_a = _box3_sum_raw(ac * ac) / n - mu_a * mu_a
        var_b = _box3_sum_raw(bc * bc) / n - mu_b * mu_b
        cov = _box3_sum_raw(ac * bc) / n - mu_a * mu_b
        big_a = 2.0 * (mu_a * mu_b) + _SSIM_C1
        big_b = 2.0 * cov + _SSIM_C2
        big_c = mu_a * mu_a + mu_b * mu_b + _SSIM_C1
        big_d = var_a + var_b + _SSIM_C2
        term = (big_a * big_b) / (big_c * big_d)
        acc = term if acc is None else acc + term
        saved.append((ac, bc, mu_a, mu_b, big_a, big_b, big_c, big_d))
    out = acc / float(channels) if channels > 1 else acc
    if not isinstance(b, ad.Var):
        return out

    def vjp(g):
        grad = np.zeros_like(b_values)
        for c, (ac, bc, mu_a, mu_b, big_a, big_b, big_c, big_d) in enumerate(saved):
            gc = g / float(channels)
            cd = big_c * big_d
            d_a = gc * big_b / cd
            d_b = gc * big_a / cd
            d_cd = -gc * big_a * big_b / (cd * cd)
            d_c = d_cd * big_d
            d_d = d_cd * big_c
            # A = 2 mu_a mu_b + C1, B = 2 (q_ab - mu_a mu_b) + C2,
            # C = mu_a^2 + mu_b^2 + C1, D = var_a + (q_b - mu_b^2) + C2
            d_mu_b = 2.0 * mu_a * (d_a - d_b) + 2.0 * mu_b * (d_c - d_d)
            d_q_b = d_d
            d_q_ab = 2.0 * d_b
            grad[..., c] = (_box3_sum_raw(d_mu_b / n)
                            + 2.0 * bc * _box3_sum_raw(d_q_b / n)
                            + ac * _box3_sum_raw(d_q_ab / n))
        return grad

    return ad.Var(out, ((b, vjp),))


def ssim_values(a, b):
    """Per-pixel SSIM map of two (H, W, C) values, averaged over channels.

    3x3 uniform window normalized by the in-grid neighbor count, constants
    C1 = 0.01^2 and C2 = 0.03^2 for intensities in [0, 1]. Either argument
    may be an autodiff Var; the reference-constant case runs fused.
    """
    av, bv = ad.value_of(a), ad.value_of(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch {av.shape} vs {bv.shape}")
    if not isinstance(a, ad.Var):
        return _ssim_fused(av, b)
    if not isinstance(b, ad.Var):
        # SSIM is symmetric in its arguments
        return _ssim_fused(bv, a)

    h, w, channels = av.shape
    count = ad.box3_count(h, w)
    acc = None
    for c in range(channels):
        ac = ad.getitem(a, (Ellipsis, c))
        bc = ad.getitem(b, (Ellipsis, c))
        mu_a = ad.box3_sum(ac) / count
        mu_b = ad.box3_sum(bc) / count
        var_a = ad.box3_sum(ac * ac) / count - mu_a * mu_a
        var_b = ad.box3_sum(bc * bc) / count - mu_b * mu_b
        cov = ad.box3_sum(ac * bc) / count - mu_a * mu_b
        num = (2.0 * (mu_a * mu_b) + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
        term = num / den
        acc = term if acc is None else acc + term
    return acc / float(channels) if channels > 1 else acc


# ---------------------------------------------------------------------------
# public grid API
# ---------------------------------------------------------------------------

def bilinear_sample(img: ImageGrid, coord):
    """Blend the 4 integer neighbors of a continuous (u, v) coordinate.

    Returns (values as a (C,) array, valid). Out-of-range coordinates (any
    neighbor outside the grid) give zeros and valid = False.
    """
    u, v = float(coord[0]), float(coord[1])
    h, w = img.height, img.width
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1) or not (np.isfinite(u) and np.isfinite(v)):
        return np.zeros(img.channels), False
    u0 = int(np.clip(np.floor(u), 0, max(w - 2, 0)))
    v0 = int(np.clip(np.floor(v), 0, max(h - 2, 0)))
    wu = u - u0
    wv = v - v0
    vals = img.values
    out = ((1 - wu) * (1 - wv) * vals[v0, u0] + wu * (1 - wv) * vals[v0, u0 + 1]
           + (1 - wu) * wv * vals[v0 + 1, u0] + wu * wv * vals[v0 + 1, u0 + 1])
    return out, True


def warp_source_to_target(src: ImageGrid, depth: DenseDepthMap, pose: Pose6,
                          intrinsics: Intrinsics):
    """Synthesize the target view from a source image, target depth and the
    target-to-source pose. Returns (ImageGrid, validity mask)."""
    if (src.height, src.width) != (depth.height, depth.width):
        raise ValueError(
            f"source {src.height}x{src.width} and depth {depth.height}x{depth.width} disagree")
    if (intrinsics.width, intrinsics.height) != (src.width, src.height):
        raise ValueError(
            f"intrinsics are {intrinsics.width}x{intrinsics.height} but grids are "
            f"{src.width}x{src.height}")
    warped, valid, _ = warp_values(src.values, depth.values, pose.as_array(), intrinsics)
    return ImageGrid(np.clip(warped, 0.0, 1.0)), valid


@singledispatch
def hflip(grid):
    raise TypeError(f"cannot flip {type(grid).__name__}")


@hflip.register
def _(grid: ImageGrid) -> ImageGrid:
    return ImageGrid(grid.values[:, ::-1].copy())


@hflip.register
def _(grid: DenseDepthMap) -> DenseDepthMap:
    return DenseDepthMap(grid.values[:, ::-1].copy())


@hflip.register
def _(grid: SparseDepthMap) -> SparseDepthMap:
    return SparseDepthMap(grid.values[:, ::-1].copy())


def ssim(a: ImageGrid, b: ImageGrid) -> np.ndarray:
    """Per-pixel SSIM in [-1, 1] between two images of the same shape."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"shape mismatch {a.values.shape} vs {b.values.shape}")
    return np.asarray(ssim_values(a.values, b.values))


def spatial_gradients(grid):
    """Forward-difference gradients (d/dx, d/dy), zero on the last column/row."""
    values = grid.values if hasattr(grid, "values") else np.asarray(grid, dtype=np.float64)
    if values.shape[0] < 2 or values.shape[1] < 2:
        raise ValueError(f"need at least 2x2 grid, got {values.shape[:2]}")
    return gradient_x(values), gradient_y(values)


# ---------------------------------------------------------------------------
# file formats: 8-bit images, 16-bit depth PNGs (value = meters * 256)
# ---------------------------------------------------------------------------

DEPTH_PNG_SCALE = 256.0


def load_image(path) -> ImageGrid:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageGrid(arr)


def save_image(grid: ImageGrid, path):
    arr = np.round(grid.values * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def save_depth_png(values, path):
    """Write depth in meters as 16-bit PNG; zeros mark invalid pixels."""
    values = np.asarray(values, dtype=np.float64)
    raw = np.round(values * DEPTH_PNG_SCALE)
    if raw.min() < 0 or raw.max() > 65535:
        raise ValueError("depth out of range for 16-bit PNG encoding")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def load_sparse_depth(path) -> SparseDepthMap:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"depth PNG must be single-channel, got shape {raw.shape}")
    return SparseDepthMap(raw / DEPTH_PNG_SCALE)


def load_dense_depth(path) -> DenseDepthMap:
    sparse = load_sparse_depth(path)
    if not sparse.mask.all():
        raise ValueError(f"{path} has invalid pixels; not a dense depth map")
    return DenseDepthMap(sparse.values)
