"""Differentiable primitives over the architecture's operation set.

Every function takes/returns `Tensor`, computes the forward value with numpy,
and registers a backward closure on the active tape. Elementwise binary ops
broadcast like numpy; gradients are summed back down to the input shapes.
"""
from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    check_finite,
    record,
)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _same_dtype(*xs: Tensor) -> None:
    dtypes = {x.dtype.type for x in xs}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed tensor dtypes {sorted(d.__name__ for d in dtypes)}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    try:
        out_data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    check_finite("add", out_data)
    out = Tensor(out_data)

    def grads(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return record(out, (a, b), grads)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    try:
        out_data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e
    check_finite("sub", out_data)
    out = Tensor(out_data)

    def grads(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return record(out, (a, b), grads)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    try:
        out_data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    check_finite("mul", out_data)
    out = Tensor(out_data)
    ad, bd = a.data, b.data

    def grads(g, needs):
        return (
            _unbroadcast(g * bd, a.shape) if needs[0] else None,
            _unbroadcast(g * ad, b.shape) if needs[1] else None,
        )

    return record(out, (a, b), grads)


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    out = Tensor(x.data * np.asarray(s, dtype=x.dtype))
    check_finite("scale", out.data)
    return record(out, (x,), lambda g, needs: (g * s,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def grads(g, needs):
        return (g * mask,)

    return record(out, (x,), grads)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)

    def grads(g, needs):
        return (g * (1.0 - y * y),)

    return record(out, (x,), grads)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    out = Tensor(y)

    def grads(g, needs):
        return (g * y * (1.0 - y),)

    return record(out, (x,), grads)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # split by sign to avoid exp overflow at large |v|
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x) -> Tensor:
    """log(1 + e^x), computed as max(x, 0) + log1p(exp(-|x|))."""
    x = as_tensor(x)
    v = x.data
    y = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    out = Tensor(y)
    sig = _sigmoid_np(v)

    def grads(g, needs):
        return (g * sig,)

    return record(out, (x,), grads)


def pow_const(x, p: float) -> Tensor:
    """x**p for x >= 0 and constant p >= 0; gradient at x=0 defined as 0."""
    x = as_tensor(x)
    p = float(p)
    if p < 0:
        raise ValueError("pow_const requires p >= 0")
    out_data = np.power(x.data, p)
    check_finite("pow_const", out_data)
    out = Tensor(out_data)
    if p == 0.0:
        return record(out, (x,), lambda g, needs: (np.zeros_like(g),))
    xd = x.data

    def grads(g, needs):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(xd, p - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return record(out, (x,), grads)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    check_finite("matmul", out_data)
    out = Tensor(out_data)
    ad, bd = a.data, b.data

    def grads(g, needs):
        return (
            g @ bd.T if needs[0] else None,
            ad.T @ g if needs[1] else None,
        )

    return record(out, (a, b), grads)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def grads(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for a in sorted(a % len(shape) for a in ax):
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (x,), grads)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in ax]))
    s = sum_(x, axis=axis, keepdims=keepdims)
    return scale(s, 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def grads(g, needs):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record(out, (x,), grads)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift per channel."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layernorm: gamma/beta {gamma.shape}/{beta.shape} do not match channels {x.shape[-1:]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    check_finite("layernorm", out.data)
    n = x.shape[-1]
    gd = gamma.data

    def grads(g, needs):
        gx = None
        if needs[0]:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red) if needs[1] else None
        gbeta = g.sum(axis=red) if needs[2] else None
        return (gx, ggamma, gbeta)

    return record(out, (x, gamma, beta), grads)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e
    out = Tensor(out_data)
    orig = x.shape

    def grads(g, needs):
        return (g.reshape(orig),)

    return record(out, (x,), grads)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def grads(g, needs):
        return (np.transpose(g, inv),)

    return record(out, (x,), grads)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: empty input list")
    _same_dtype(*xs)
    try:
        out_data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from e
    out = Tensor(out_data)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def grads(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tuple(xs), grads)


def slice_(x, key) -> Tensor:
    """Basic slicing (ints and slices only); gradient scatters into zeros."""
    x = as_tensor(x)
    out = Tensor(x.data[key].copy())
    shape = x.shape

    def grads(g, needs):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return record(out, (x,), grads)


def take_rows(x, idx) -> Tensor:
    """Gather rows along the first axis; gradient is a scatter-add."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows: index must be 1-d")
    out = Tensor(x.data[idx])
    shape = x.shape
    # strictly increasing indices cannot collide, so the scatter-add
    # degenerates to plain assignment (np.add.at is orders slower)
    distinct = idx.size == 0 or bool(np.all(np.diff(idx) > 0))

    def grads(g, needs):
        gx = np.zeros(shape, dtype=g.dtype)
        if distinct:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return record(out, (x,), grads)


def segment_sum(x, seg_ids, num_segments: int) -> Tensor:
    """Sum rows of `x` into `num_segments` buckets given per-row segment ids."""
    x = as_tensor(x)
    seg = np.asarray(seg_ids, dtype=np.int64)
    if seg.ndim != 1 or seg.shape[0] != x.shape[0]:
        raise ShapeError(
            f"segment_sum: ids shape {seg.shape} does not match rows {x.shape[0]}"
        )
    out_data = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    if seg.size and np.all(np.diff(seg) >= 0):
        # sorted ids: reduceat-style contiguous-run sums beat np.add.at
        uniq, first = np.unique(seg, return_index=True)
        out_data[uniq] = np.add.reduceat(x.data, first, axis=0)
    else:
        np.add.at(out_data, seg, x.data)
    out = Tensor(out_data)

    def grads(g, needs):
        return (g[seg],)

    return record(out, (x,), grads)


def weighted_sum(values, weights) -> Tensor:
    """Per-group convex combination: (G, S, C) values x (G, S) weights -> (G, C)."""
    values, weights = as_tensor(values), as_tensor(weights)
    _same_dtype(values, weights)
    if values.ndim != 3 or weights.ndim != 2 or values.shape[:2] != weights.shape:
        raise ShapeError(
            f"weighted_sum: values {values.shape} incompatible with weights {weights.shape}"
        )
    out = Tensor(np.einsum("gsc,gs->gc", values.data, weights.data))
    vd, wd = values.data, weights.data

    def grads(g, needs):
        gv = wd[:, :, None] * g[:, None, :] if needs[0] else None
        gw = np.einsum("gsc,gc->gs", vd, g) if needs[1] else None
        return (gv, gw)

    return record(out, (values, weights), grads)
