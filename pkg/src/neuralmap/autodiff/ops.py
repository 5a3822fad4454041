"""Differentiable operations.

Maps are ``[C, H, W]`` or batched ``[B, C, H, W]``; positions are ``(x, y)``
pairs (column, row), or an integer array of shape ``[B, 2]`` for batched maps.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import DimensionError, NumericError, Value, as_value, make_output


def _acc(v: Value, g) -> None:
    if v.requires_grad:
        v.accumulate(g)


def _same_shape(a: Value, b: Value, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------- linear

def matmul(a: Value, b: Value) -> Value:
    """``a @ b`` for ``a`` of shape [m, k] (or [k]) and ``b`` of shape [k, n]."""
    a, b = as_value(a), as_value(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(g @ B.T)
        if b.requires_grad:
            b.accumulate(np.outer(A, g) if A.ndim == 1 else A.T @ g)

    return make_output(A @ B, (a, b), rule)


def add_bias(x: Value, bias: Value) -> Value:
    """Add a [n] bias along the last axis of ``x``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        _acc(x, g)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=lead) if lead else g)

    return make_output(x.data + bias.data, (x, bias), rule)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 3, 3, h, w), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * 9, h * w)


def conv2d(x: Value, kernels: Value, bias: Value) -> Value:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernels must be [C_out, C_in, 3, 3], got {kernels.shape}")
    if x.ndim not in (3, 4) or x.shape[-3] != kernels.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} for {kernels.shape[0]} output channels")
    batched = x.ndim == 4
    X = x.data if batched else x.data[None]
    n, c, h, w = X.shape
    c_out = kernels.shape[0]
    xp = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w)
    k2 = kernels.data.reshape(c_out, c * 9)
    out = np.matmul(k2, cols) + bias.data[None, :, None]
    out = out.reshape(n, c_out, h, w)

    def rule(g):
        g2 = (g if batched else g[None]).reshape(n, c_out, h * w)
        if kernels.requires_grad:
            gk = np.einsum("bop,bkp->ok", g2, cols)
            kernels.accumulate(gk.reshape(kernels.shape))
        if bias.requires_grad:
            bias.accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(k2.T, g2).reshape(n, c, 3, 3, h, w)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, :, i, j]
            gx = gxp[:, :, 1:-1, 1:-1]
            x.accumulate(gx if batched else gx[0])

    return make_output(out if batched else out[0], (x, kernels, bias), rule)


# ---------------------------------------------------------------- pointwise

def add(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    _same_shape(a, b, "add")

    def rule(g):
        _acc(a, g)
        _acc(b, g)

    return make_output(a.data + b.data, (a, b), rule)


def sub(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    _same_shape(a, b, "sub")

    def rule(g):
        _acc(a, g)
        _acc(b, -g)

    return make_output(a.data - b.data, (a, b), rule)


def mul(a: Value, b: Value) -> Value:
    """Hadamard product."""
    a, b = as_value(a), as_value(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data

    def rule(g):
        _acc(a, g * B)
        _acc(b, g * A)

    return make_output(A * B, (a, b), rule)


def scale(x: Value, k: float) -> Value:
    def rule(g):
        x.accumulate(g * k)

    return make_output(x.data * x.data.dtype.type(k), (x,), rule)


def shift(x: Value, c) -> Value:
    """Add a constant (scalar or array of ``x``'s shape)."""
    c = np.asarray(c, dtype=x.data.dtype)
    if c.ndim and c.shape != x.shape:
        raise DimensionError(f"shift: constant {c.shape} for value {x.shape}")

    def rule(g):
        x.accumulate(g)

    return make_output(x.data + c, (x,), rule)


def mask(x: Value, m: np.ndarray) -> Value:
    """Multiply by a constant array broadcast against ``x`` (no gradient to ``m``)."""
    m = np.asarray(m, dtype=x.data.dtype)
    out = x.data * m

    def rule(g):
        x.accumulate(np.broadcast_to(g * m, x.shape))

    return make_output(out, (x,), rule)


def sigmoid(x: Value) -> Value:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def rule(g):
        x.accumulate(g * s * (1.0 - s))

    return make_output(s, (x,), rule)


def tanh(x: Value) -> Value:
    t = np.tanh(x.data)

    def rule(g):
        x.accumulate(g * (1.0 - t * t))

    return make_output(t, (x,), rule)


def relu(x: Value) -> Value:
    on = x.data > 0

    def rule(g):
        x.accumulate(g * on)

    return make_output(x.data * on, (x,), rule)


def exp(x: Value) -> Value:
    e = np.exp(x.data)

    def rule(g):
        x.accumulate(g * e)

    return make_output(e, (x,), rule)


_POINTWISE = {
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu,
    "add": add, "sub": sub, "mul": mul, "scale": scale,
}


def pointwise(kind: str, *args) -> Value:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise op {kind!r}") from None
    return fn(*args)


# ------------------------------------------------------------------ shaping

def concat(parts: Sequence[Value], axis: int = -1) -> Value:
    if not parts:
        raise ValueError("concat needs at least one part")
    parts = [as_value(p) for p in parts]
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise DimensionError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def rule(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * ndim
                idx[ax] = slice(lo, hi)
                p.accumulate(g[tuple(idx)])

    return make_output(np.concatenate([p.data for p in parts], axis=ax), parts, rule)


def stack(parts: Sequence[Value], axis: int = 0) -> Value:
    if not parts:
        raise ValueError("stack needs at least one part")
    for p in parts[1:]:
        _same_shape(parts[0], p, "stack")

    def rule(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p.accumulate(np.take(g, i, axis=axis))

    return make_output(np.stack([p.data for p in parts], axis=axis), parts, rule)


def slice_axis(x: Value, axis: int, start: int, stop: int) -> Value:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def rule(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x.accumulate(full)

    return make_output(x.data[idx], (x,), rule)


def reshape(x: Value, shape) -> Value:
    def rule(g):
        x.accumulate(g.reshape(x.shape))

    return make_output(x.data.reshape(shape), (x,), rule)


def detach(x: Value) -> Value:
    return x.detach()


# ---------------------------------------------------------------- reductions

def sum(x: Value, axis=None) -> Value:  # noqa: A001 - mirrors numpy
    def rule(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(gg, x.shape))

    return make_output(np.asarray(x.data.sum(axis=axis)), (x,), rule)


def mean(x: Value) -> Value:
    n = x.data.size

    def rule(g):
        x.accumulate(np.broadcast_to(g / n, x.shape))

    return make_output(np.asarray(x.data.mean()), (x,), rule)


def pick(x: Value, index: np.ndarray) -> Value:
    """Select ``x[i, index[i]]`` from a [B, n] value."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def rule(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        x.accumulate(full)

    return make_output(x.data[rows, index], (x,), rule)


# ----------------------------------------------------------------- softmaxes

def _check_finite(a: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Value) -> Value:
    """Softmax over the last axis."""
    _check_finite(x.data, "softmax")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        x.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return make_output(p, (x,), rule)


def log_softmax(x: Value) -> Value:
    """Log-probabilities over the last axis via log-sum-exp."""
    _check_finite(x.data, "log_softmax")
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    out = x.data - lse

    def rule(g):
        p = np.exp(out)
        x.accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return make_output(out, (x,), rule)


def softmax_positions(scores: Value) -> Value:
    """Normalise [..., H, W] scores into a distribution over all H*W positions."""
    if scores.ndim < 2:
        raise DimensionError(f"softmax_positions: need [..., H, W], got {scores.shape}")
    if np.isnan(scores.data).any():
        raise NumericError("softmax_positions: NaN score")
    lead = scores.shape[:-2]
    flat = reshape(scores, lead + (-1,))
    return reshape(softmax(flat), scores.shape)


# --------------------------------------------------------------- map access

def _positions(m: np.ndarray, pos) -> tuple:
    """Return (batch_rows, xs, ys) index arrays, validating bounds."""
    h, w = m.shape[-2:]
    if m.ndim == 3:
        x, y = int(pos[0]), int(pos[1])
        xs, ys, rows = np.array([x]), np.array([y]), None
    else:
        p = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
        if p.shape[0] != m.shape[0]:
            raise DimensionError(f"{p.shape[0]} positions for batch of {m.shape[0]}")
        xs, ys, rows = p[:, 0], p[:, 1], np.arange(m.shape[0])
    if (xs < 0).any() or (xs >= w).any() or (ys < 0).any() or (ys >= h).any():
        raise IndexError(f"position {pos} outside map of extent {w}x{h}")
    return rows, xs, ys


def gather_column(m: Value, pos) -> Value:
    """Read the feature column M^(x,y)."""
    rows, xs, ys = _positions(m.data, pos)
    if rows is None:
        idx = (slice(None), ys[0], xs[0])
        out = m.data[idx].copy()
    else:
        out = m.data[rows, :, ys, xs]

    def rule(g):
        full = np.zeros_like(m.data)
        if rows is None:
            full[idx] = g
        else:
            full[rows, :, ys, xs] = g
        m.accumulate(full)

    return make_output(out, (m,), rule)


def scatter_write(m: Value, pos, vec: Value) -> Value:
    """Functional write: copy of ``m`` with column ``pos`` replaced by ``vec``."""
    rows, xs, ys = _positions(m.data, pos)
    if vec.shape != m.shape[:-3] + m.shape[-3:-2]:
        raise DimensionError(f"scatter_write: vector {vec.shape} for map {m.shape}")
    out = m.data.copy()
    if rows is None:
        idx = (slice(None), ys[0], xs[0])
        out[idx] = vec.data
    else:
        out[rows, :, ys, xs] = vec.data

    def rule(g):
        if m.requires_grad:
            gm = g.copy()
            if rows is None:
                gm[idx] = 0
            else:
                gm[rows, :, ys, xs] = 0
            m.accumulate(gm)
        if vec.requires_grad:
            vec.accumulate(g[idx] if rows is None else g[rows, :, ys, xs])

    return make_output(out, (m, vec), rule)


def _shift_array(a: np.ndarray, du: int, dv: int) -> np.ndarray:
    """out[..., b, a] = in[..., b - dv, a - du], zero where the source is outside."""
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    if abs(du) >= w or abs(dv) >= h:
        return out
    out[..., max(dv, 0):h + min(dv, 0), max(du, 0):w + min(du, 0)] = \
        a[..., max(-dv, 0):h + min(-dv, 0), max(-du, 0):w + min(-du, 0)]
    return out


def shift2d(m: Value, delta) -> Value:
    """Translate the map by ``delta = (du, dv)`` with zero fill.

    For batched maps ``delta`` is a [B, 2] integer array.
    """
    if m.ndim == 3:
        du, dv = int(delta[0]), int(delta[1])
        out = _shift_array(m.data, du, dv)

        def rule(g):
            m.accumulate(_shift_array(g, -du, -dv))
    else:
        d = np.asarray(delta, dtype=np.int64).reshape(-1, 2)
        if d.shape[0] != m.shape[0]:
            raise DimensionError(f"{d.shape[0]} shifts for batch of {m.shape[0]}")
        out = np.stack([_shift_array(m.data[i], du, dv) for i, (du, dv) in enumerate(d)])

        def rule(g):
            m.accumulate(np.stack([_shift_array(g[i], -du, -dv) for i, (du, dv) in enumerate(d)]))

    return make_output(out, (m,), rule)


def crop(m: Value, center, k: int) -> Value:
    """Zero-padded k x k window of the map centred on ``center``."""
    if k % 2 != 1:
        raise ValueError("crop window must be odd")
    rows, xs, ys = _positions(m.data, center)
    r = k // 2
    pad = [(0, 0)] * (m.ndim - 2) + [(r, r), (r, r)]
    mp = np.pad(m.data, pad)
    if rows is None:
        out = mp[:, ys[0]:ys[0] + k, xs[0]:xs[0] + k].copy()
    else:
        out = np.stack([mp[i, :, y:y + k, x:x + k] for i, x, y in zip(rows, xs, ys)])

    def rule(g):
        gp = np.zeros_like(mp)
        if rows is None:
            gp[:, ys[0]:ys[0] + k, xs[0]:xs[0] + k] += g
        else:
            for i, x, y in zip(rows, xs, ys):
                gp[i, :, y:y + k, x:x + k] += g[i]
        m.accumulate(gp[..., r:r + m.shape[-2], r:r + m.shape[-1]])

    return make_output(out, (m,), rule)


def weighted_sum(m: Value, weights: Value) -> Value:
    """Per-channel sum of map columns weighted by an [..., H, W] field."""
    if weights.shape != m.shape[:-3] + m.shape[-2:]:
        raise DimensionError(f"weighted_sum: weights {weights.shape} for map {m.shape}")
    M, A = m.data, weights.data
    out = np.einsum("...chw,...hw->...c", M, A)

    def rule(g):
        if m.requires_grad:
            m.accumulate(g[..., :, None, None] * A[..., None, :, :])
        if weights.requires_grad:
            weights.accumulate(np.einsum("...c,...chw->...hw", g, M))

    return make_output(out, (m, weights), rule)


def channel_dot(m: Value, q: Value) -> Value:
    """Inner product of a query vector with every map column -> [..., H, W]."""
    if q.shape != m.shape[:-3] + m.shape[-3:-2]:
        raise DimensionError(f"channel_dot: query {q.shape} for map {m.shape}")
    M, Q = m.data, q.data
    out = np.einsum("...chw,...c->...hw", M, Q)

    def rule(g):
        if m.requires_grad:
            m.accumulate(Q[..., :, None, None] * g[..., None, :, :])
        if q.requires_grad:
            q.accumulate(np.einsum("...hw,...chw->...c", g, M))

    return make_output(out, (m, q), rule)
