"""Reverse-mode gradient accumulation over numpy values.

Every operation here accepts either `Var` nodes or plain array-likes. When no
operand is a `Var` the computation short-circuits to raw numpy, which is what
the finite-difference harness relies on for cheap re-evaluations. When at
least one operand is a `Var`, the result is a `Var` that remembers how to
push an upstream gradient back to its parents.

One `Tape` owns the leaf variables of one optimization problem. Tapes are not
thread-safe and must not be shared across concurrent evaluations; independent
problems get independent tapes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DeterminismError

_counter = itertools.count()


def _coerce(value):
    a = np.asarray(value, dtype=np.float64)
    return a


class Var:
    """A value participating in gradient accumulation.

    `value` is always a float64 ndarray (0-d for scalars). `grad` is populated
    by `backward` and has the same shape as `value`.
    """

    __slots__ = ("value", "grad", "_parents", "_order")

    # make ndarray <op> Var fall back to the Var reflected operators instead
    # of numpy object broadcasting
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = _coerce(value)
        self.grad = None
        self._parents = parents
        self._order = next(_counter)

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, order={self._order})"

    # arithmetic sugar; mixing with plain arrays/floats lifts them to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value_of(x):
    """Underlying ndarray of a Var, or the array form of a plain value."""
    if isinstance(x, Var):
        return x.value
    return _coerce(x)


def _is_var(x):
    return isinstance(x, Var)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b):
    av, bv = value_of(a), value_of(b)
    out_value = fwd(av, bv)
    if not (_is_var(a) or _is_var(b)):
        return out_value
    same = av.shape == bv.shape == out_value.shape
    parents = []
    if _is_var(a):
        if same:
            parents.append((a, lambda g, av=av, bv=bv: vjp_a(g, av, bv)))
        else:
            parents.append((a, lambda g, av=av, bv=bv: _unbroadcast(vjp_a(g, av, bv), av.shape)))
    if _is_var(b):
        if same:
            parents.append((b, lambda g, av=av, bv=bv: vjp_b(g, av, bv)))
        else:
            parents.append((b, lambda g, av=av, bv=bv: _unbroadcast(vjp_b(g, av, bv), bv.shape)))
    return Var(out_value, tuple(parents))


def _unary(a, fwd, vjp):
    av = value_of(a)
    out_value = fwd(av)
    if not _is_var(a):
        return out_value
    return Var(out_value, ((a, lambda g, av=av, ov=out_value: vjp(g, av, ov)),))


def add(a, b):
    return _binary(a, b, np.add, lambda g, av, bv: g, lambda g, av, bv: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, av, bv: g * bv, lambda g, av, bv: g * av)


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda g, av, bv: g / bv,
        lambda g, av, bv: -g * av / (bv * bv),
    )


def absolute(a):
    # subgradient at 0 is 0 (np.sign(0) == 0), which keeps exact-consistency
    # fixed points stationary
    return _unary(a, np.abs, lambda g, av, ov: g * np.sign(av))


def exp(a):
    return _unary(a, np.exp, lambda g, av, ov: g * ov)


def log(a):
    return _unary(a, np.log, lambda g, av, ov: g / av)


def sin(a):
    return _unary(a, np.sin, lambda g, av, ov: g * np.cos(av))


def cos(a):
    return _unary(a, np.cos, lambda g, av, ov: -g * np.sin(av))


def square(a):
    return _unary(a, np.square, lambda g, av, ov: 2.0 * g * av)


def total(a):
    """Sum of all elements, as a scalar."""
    return _unary(a, np.sum, lambda g, av, ov: np.broadcast_to(g, av.shape).copy())


def mean(a):
    """Mean over all elements, as a scalar."""
    def vjp(g, av, ov):
        return np.broadcast_to(g / av.size, av.shape).copy()
    return _unary(a, np.mean, vjp)


def getitem(a, idx):
    def vjp(g, av, ov, idx=idx):
        out = np.zeros_like(av)
        out[idx] = g
        return out
    av = value_of(a)
    if not _is_var(a):
        return av[idx]
    return Var(av[idx], ((a, lambda g, av=av: vjp(g, av, None)),))


def where(mask, a, b):
    """Select per element with a constant boolean mask. No gradient flows
    through the mask; the unselected branch receives zero gradient."""
    mask = np.asarray(mask, dtype=bool)
    return _binary(
        a, b,
        lambda av, bv: np.where(mask, av, bv),
        lambda g, av, bv: np.where(mask, g, 0.0),
        lambda g, av, bv: np.where(mask, 0.0, g),
    )


def flip_columns(a):
    """Reverse the column (width) axis of an (H, W) or (H, W, C) value."""
    return _unary(
        a,
        lambda av: av[:, ::-1].copy(),
        lambda g, av, ov: g[:, ::-1].copy(),
    )


def _shift2d_raw(a, dy, dx):
    out = np.zeros_like(a)
    h, w = a.shape[0], a.shape[1]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = a[src_y, src_x]
    return out


def shift2d(a, dy, dx):
    """Translate the first two axes by (dy, dx), filling with zeros."""
    return _unary(
        a,
        lambda av: _shift2d_raw(av, dy, dx),
        lambda g, av, ov: _shift2d_raw(g, -dy, -dx),
    )


_box3_axis_cache = {}


def _box3_axis(n):
    bounds = _box3_axis_cache.get(n)
    if bounds is None:
        idx = np.arange(n)
        bounds = (np.maximum(idx - 1, 0), np.minimum(idx + 2, n))
        _box3_axis_cache[n] = bounds
    return bounds


def _box3_sum_raw(a):
    # separable sliding sums over prefix sums; ~3x faster than 9 shifts
    h, w = a.shape
    lo_x, hi_x = _box3_axis(w)
    lo_y, hi_y = _box3_axis(h)
    row_prefix = np.zeros((h, w + 1))
    np.cumsum(a, axis=1, out=row_prefix[:, 1:])
    row_window = row_prefix[:, hi_x] - row_prefix[:, lo_x]
    col_prefix = np.zeros((h + 1, w))
    np.cumsum(row_window, axis=0, out=col_prefix[1:, :])
    return col_prefix[hi_y, :] - col_prefix[lo_y, :]


def box3_sum(a):
    """Sum over the 3x3 neighborhood of each (H, W) pixel, zero outside the
    grid. Self-adjoint, so the backward pass is the same box sum."""
    return _unary(a, _box3_sum_raw, lambda g, av, ov: _box3_sum_raw(g))


_box3_count_cache = {}


def box3_count(height, width):
    """Number of in-grid neighbors per pixel for the 3x3 window (4/6/9)."""
    key = (height, width)
    if key not in _box3_count_cache:
        _box3_count_cache[key] = _box3_sum_raw(np.ones((height, width), dtype=np.float64))
    return _box3_count_cache[key]


def projection_row(s1, g1, s2, g2, s3, s4, inv_depth):
    """Fused s1*g1 + s2*g2 + s3 + s4*inv_depth for the pixel transform.

    s1..s4 are scalars (Var or number), g1/g2 constant coefficient grids and
    inv_depth a grid (Var or array). Equivalent to the composed elementwise
    ops but recorded as a single node.
    """
    vs1, vs2, vs3, vs4 = (value_of(s) for s in (s1, s2, s3, s4))
    vd = value_of(inv_depth)
    out = vs1 * g1 + vs2 * g2 + vs3 + vs4 * vd
    if not any(_is_var(x) for x in (s1, s2, s3, s4, inv_depth)):
        return out
    parents = []
    if _is_var(s1):
        parents.append((s1, lambda g: np.asarray((g * g1).sum())))
    if _is_var(s2):
        parents.append((s2, lambda g: np.asarray((g * g2).sum())))
    if _is_var(s3):
        parents.append((s3, lambda g: np.asarray(g.sum())))
    if _is_var(s4):
        parents.append((s4, lambda g, vd=vd: np.asarray((g * vd).sum())))
    if _is_var(inv_depth):
        parents.append((inv_depth, lambda g, vs4=vs4: g * vs4))
    return Var(out, tuple(parents))


def bilinear_blend(wu, wv, c00, c10, c01, c11):
    """Fused 4-corner bilinear mix with constant corner values.

    wu/wv are (H, W) fractional offsets (Var or array); corner values are
    constant (H, W, C) gathers. Gradients flow to the weights only.
    """
    wuv, wvv = value_of(wu), value_of(wv)
    ou = 1.0 - wuv
    ov = 1.0 - wvv
    out = ((ou * ov)[..., None] * c00 + (wuv * ov)[..., None] * c10
           + (ou * wvv)[..., None] * c01 + (wuv * wvv)[..., None] * c11)
    if not (_is_var(wu) or _is_var(wv)):
        return out
    parents = []
    if _is_var(wu):
        du = (c10 - c00) * ov[..., None] + (c11 - c01) * wvv[..., None]
        parents.append((wu, lambda g, du=du: (g * du).sum(axis=-1)))
    if _is_var(wv):
        dv = (c01 - c00) * ou[..., None] + (c11 - c10) * wuv[..., None]
        parents.append((wv, lambda g, dv=dv: (g * dv).sum(axis=-1)))
    return Var(out, tuple(parents))


def backward(root, variables=None):
    """Accumulate gradients of a scalar `root` into every reachable Var.

    Returns a dict mapping each Var in `variables` (or every reachable leaf
    when None) to its gradient; Vars in `variables` that the root does not
    depend on get a zero gradient. Also stores gradients on `Var.grad`.
    """
    if not isinstance(root, Var):
        raise ValueError("backward root must be a Var produced by recorded operations")
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")

    # iterative topological collection; creation order is already topological
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append(parent)
    nodes.sort(key=lambda n: n._order, reverse=True)

    grads = {id(root): np.ones_like(root.value)}
    by_id = {id(root): root}
    for node in nodes:
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g
        for parent, vjp in node._parents:
            contribution = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contribution
            else:
                grads[pid] = contribution
                by_id[pid] = parent

    if variables is None:
        variables = [n for n in nodes if not n._parents]
    out = {}
    for v in variables:
        g = grads.get(id(v))
        if g is None:
            g = np.zeros_like(v.value)
            v.grad = g
        out[v] = g
    return out


class Tape:
    """Registry of leaf variables for one optimization problem.

    Gradient recording itself lives on the nodes; the tape only tracks which
    leaves should receive gradients (zero when unused by the root).
    """

    def __init__(self):
        self.variables = []

    def variable(self, value):
        v = Var(value)
        self.variables.append(v)
        return v

    def backward(self, root):
        return backward(root, self.variables)


@dataclass
class FiniteDifferenceReport:
    """Worst-case comparison of analytic vs central-difference gradients."""

    max_rel_error: float = 0.0
    worst_variable: int = -1
    worst_component: tuple = ()
    n_checked: int = 0
    details: list = field(default_factory=list)


def _rel_error(g_an, g_fd):
    return abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)


def finite_difference_check(f, values, steps, grid_samples=256, rng=None,
                            sample_masks=None):
    """Compare analytic gradients of `f` against central finite differences.

    `f` maps one positional argument per entry of `values` (Var or ndarray)
    to a scalar. `values` are the base ndarrays, `steps` the per-variable
    step sizes. For variables with more than `grid_samples` elements, a
    random subset of components is checked; `sample_masks` (one boolean array
    per variable, or None) restricts which components are eligible, which is
    how callers exclude non-differentiable neighborhoods such as bilinear
    kernel kinks.
    """
    values = [np.asarray(v, dtype=np.float64) for v in values]
    base = float(value_of(f(*values)))
    again = float(value_of(f(*values)))
    if base != again:
        raise DeterminismError(f"function returned {base} then {again} on identical inputs")

    tape = Tape()
    vars_ = [tape.variable(v) for v in values]
    root = f(*vars_)
    grads = tape.backward(root)
    analytic = [grads[v] for v in vars_]

    if rng is None:
        rng = np.random.default_rng(0)

    report = FiniteDifferenceReport()
    for vi, (v, h) in enumerate(zip(values, steps)):
        flat_eligible = np.arange(v.size)
        if sample_masks is not None and sample_masks[vi] is not None:
            flat_eligible = np.flatnonzero(np.asarray(sample_masks[vi]).ravel())
        if flat_eligible.size == 0:
            continue
        if flat_eligible.size > grid_samples:
            flat_eligible = rng.choice(flat_eligible, size=grid_samples, replace=False)
        for flat in flat_eligible:
            idx = np.unravel_index(flat, v.shape) if v.ndim else ()
            perturbed = [u.copy() for u in values]
            perturbed[vi][idx] += h
            f_plus = float(value_of(f(*perturbed)))
            perturbed[vi][idx] -= 2.0 * h
            f_minus = float(value_of(f(*perturbed)))
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g_an = float(analytic[vi][idx]) if v.ndim else float(analytic[vi])
            err = _rel_error(g_an, g_fd)
            report.n_checked += 1
            report.details.append((vi, idx, g_an, g_fd, err))
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_variable = vi
                report.worst_component = idx
    return report
