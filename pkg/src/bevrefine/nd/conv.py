"""Convolution, batch normalization, and bilinear upsampling primitives."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, check_finite, record


def _to_nhwc(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected rank-3 or rank-4 feature map, got shape {x.shape}")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NHWC layout, kernel (kh, kw, Cin, Cout)."""
    x = as_tensor(x)
    w = as_tensor(w)
    x4, squeeze = _to_nhwc(x)
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4, got {w.shape}")
    kh, kw, cin, cout = w.shape
    n, h, wd, cx = x4.shape
    if cx != cin:
        raise ShapeError(f"conv2d: input channels {cx} != kernel channels {cin}")
    s = int(stride)
    p = int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")

    xd = x4.data
    if p > 0:
        xd = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    # win: (n, hp, wp, cin, kh, kw) -> strided spatial sample, channel-last cols
    win = win[:, ::s, ::s][:, :ho, :wo]
    cols = np.ascontiguousarray(np.moveaxis(win, 3, 5)).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = cols @ wmat
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out_data = out_data + b.data
    out_data = out_data.reshape(n, ho, wo, cout)
    check_finite("conv2d", out_data)
    if squeeze:
        out = Tensor(out_data.reshape(ho, wo, cout))
    else:
        out = Tensor(out_data)

    in_shape = x.shape
    inputs = (x, w) if b is None else (x, w, b)

    def grads(g, needs):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if needs[0]:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + ho * s : s, j : j + wo * s : s, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, p : p + h, p : p + wd, :].reshape(in_shape)
        if needs[1]:
            gw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        if b is not None and needs[2]:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return record(out, inputs, grads)


def batchnorm_train(x, gamma, beta, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Training-mode batch norm over all non-channel axes.

    Returns the normalized tensor plus the batch mean/variance so callers can
    fold them into running statistics once the step is sequenced.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must be ({c},)")
    red = tuple(range(x.ndim - 1))
    m = x.size // c
    mu = x.data.mean(axis=red)
    xc = x.data - mu
    var = (xc * xc).mean(axis=red)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    check_finite("batchnorm", out.data)
    gd = gamma.data

    def grads(g, needs):
        gx = None
        if needs[0]:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=red) - xhat * (gh * xhat).mean(axis=red))
        ggamma = (g * xhat).sum(axis=red) if needs[1] else None
        gbeta = g.sum(axis=red) if needs[2] else None
        return (gx, ggamma, gbeta)

    return record(out, (x, gamma, beta), grads), mu, var


def batchnorm_eval(x, gamma, beta, mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Inference-mode batch norm using frozen running statistics."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must be ({c},)")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    check_finite("batchnorm", out.data)
    red = tuple(range(x.ndim - 1))
    gd = gamma.data

    def grads(g, needs):
        gx = g * (gd * inv) if needs[0] else None
        ggamma = (g * xhat).sum(axis=red) if needs[1] else None
        gbeta = g.sum(axis=red) if needs[2] else None
        return (gx, ggamma, gbeta)

    return record(out, (x, gamma, beta), grads)


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Row-stochastic matrix sending n_in samples to n_in*factor samples.

    Output center i reads input coordinate (i + 0.5)/factor - 0.5, clamped to
    the valid range (edge replication), i.e. the align-corners-false convention.
    """
    n_out = n_in * factor
    u = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    for i in range(n_out):
        u[i, i0[i]] += 1.0 - w1[i]
        u[i, i1[i]] += w1[i]
    return u


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear x`factor` upsampling of an (H, W, C) or (N, H, W, C) map."""
    x = as_tensor(x)
    factor = int(factor)
    if factor < 1:
        raise ShapeError(f"upsample_bilinear: factor must be >= 1, got {factor}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample_bilinear: expected rank 3 or 4, got {x.shape}")
    if factor == 1:
        return x
    hax = x.ndim - 3
    h, w = x.shape[hax], x.shape[hax + 1]
    ur = _interp_matrix(h, factor, x.data.dtype)
    uc = _interp_matrix(w, factor, x.data.dtype)
    if x.ndim == 3:
        t = np.einsum("ai,iwc->awc", ur, x.data)
        out_data = np.einsum("bj,ajc->abc", uc, t)
    else:
        t = np.einsum("ai,niwc->nawc", ur, x.data)
        out_data = np.einsum("bj,najc->nabc", uc, t)
    out = Tensor(out_data)

    def grads(g, needs):
        if x.ndim == 3:
            t2 = np.einsum("bj,abc->ajc", uc, g)
            gx = np.einsum("ai,ajc->ijc", ur, t2)
        else:
            t2 = np.einsum("bj,nabc->najc", uc, g)
            gx = np.einsum("ai,najc->nijc", ur, t2)
        return (gx,)

    return record(out, (x,), grads)
