"""Differentiable bilinear sampling of feature maps at continuous points.

Points are (x, y) pixel coordinates; texels outside [0, W-1] x [0, H-1]
contribute zero (zero-padding border). Gradients flow to both the sampled
maps and the point coordinates.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, as_tensor, record


def sample_maps(maps, map_idx, points) -> Tensor:
    """Sample a stack of K same-shape maps (K, H, W, C) at per-point map indices."""
    maps = as_tensor(maps)
    if maps.ndim != 4:
        raise ShapeError(f"sample_maps: maps must be (K, H, W, C), got {maps.shape}")
    k, h, w, c = maps.shape
    pts_t = points if isinstance(points, Tensor) else None
    pts = np.asarray(points.data if pts_t is not None else points, dtype=maps.dtype)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"sample_maps: points must be (N, 2), got {pts.shape}")
    midx = np.ascontiguousarray(np.asarray(map_idx, dtype=np.int64))
    if midx.shape != (pts.shape[0],):
        raise ShapeError(
            f"sample_maps: map_idx shape {midx.shape} must be ({pts.shape[0]},)"
        )
    if pts.shape[0] and (midx.min() < 0 or midx.max() >= k):
        raise ShapeError("sample_maps: map index out of range")

    flat = np.ascontiguousarray(maps.data.reshape(k * h * w, c))
    pts = np.ascontiguousarray(pts)
    out = Tensor(_kernels.sample_forward(flat, h, w, pts, midx))

    maps_shape = maps.shape
    inputs = (maps,) if pts_t is None else (maps, pts_t)

    def grads(g, needs):
        need_maps = needs[0]
        need_pts = len(needs) > 1 and needs[1]
        g = np.ascontiguousarray(g)
        dmaps, dpts = _kernels.sample_backward(
            flat, h, w, pts, midx, g, need_maps, need_pts
        )
        gm = dmaps.reshape(maps_shape) if need_maps else None
        if pts_t is None:
            return (gm,)
        return (gm, dpts if need_pts else None)

    return record(out, inputs, grads)


def attn_sample(maps, map_idx, points, weights) -> Tensor:
    """Fused weighted bilinear gather: sum_s weights[g, s] * sample(points[g, s]).

    ``maps`` is (K, H, W, C), ``map_idx`` a flat integer vector of length G*S
    naming the map each sample reads, ``points`` (G, S, 2) pixel coordinates
    and ``weights`` (G, S). Returns (G, C). Equivalent to sample_maps followed
    by a weighted reduction over S, without materialising the (G*S, C)
    intermediate.
    """
    maps = as_tensor(maps)
    if maps.ndim != 4:
        raise ShapeError(f"attn_sample: maps must be (K, H, W, C), got {maps.shape}")
    k, h, w, c = maps.shape
    pts_t = as_tensor(points)
    wgt_t = as_tensor(weights)
    if pts_t.ndim != 3 or pts_t.shape[2] != 2:
        raise ShapeError(f"attn_sample: points must be (G, S, 2), got {pts_t.shape}")
    groups, s_per_g = pts_t.shape[:2]
    if wgt_t.shape != (groups, s_per_g):
        raise ShapeError(
            f"attn_sample: weights shape {wgt_t.shape} must be ({groups}, {s_per_g})"
        )
    midx = np.ascontiguousarray(np.asarray(map_idx, dtype=np.int64))
    if midx.shape != (groups * s_per_g,):
        raise ShapeError(
            f"attn_sample: map_idx shape {midx.shape} must be ({groups * s_per_g},)"
        )
    if midx.size and (midx.min() < 0 or midx.max() >= k):
        raise ShapeError("attn_sample: map index out of range")

    flat = np.ascontiguousarray(maps.data.reshape(k * h * w, c))
    pts = np.ascontiguousarray(pts_t.data.reshape(groups * s_per_g, 2).astype(maps.dtype, copy=False))
    wgt = np.ascontiguousarray(wgt_t.data.reshape(groups * s_per_g).astype(maps.dtype, copy=False))
    out = Tensor(_kernels.attn_sample_forward(flat, h, w, pts, midx, wgt, groups, s_per_g))

    maps_shape = maps.shape
    pts_shape = pts_t.shape

    def grads(g, needs):
        need_maps = needs[0]
        need_pts = needs[1]
        g = np.ascontiguousarray(g)
        dmaps, dpts, dwgt = _kernels.attn_sample_backward(
            flat, h, w, pts, midx, wgt, g, need_maps, need_pts, s_per_g
        )
        gm = dmaps.reshape(maps_shape) if need_maps else None
        gp = dpts.reshape(pts_shape) if need_pts else None
        gw = dwgt.reshape(groups, s_per_g) if needs[2] else None
        return (gm, gp, gw)

    return record(out, (maps, pts_t, wgt_t), grads)


def bilinear_sample(map_, points) -> Tensor:
    """Sample one (H, W, C) map at N continuous (x, y) points -> (N, C)."""
    map_ = as_tensor(map_)
    if map_.ndim != 3:
        raise ShapeError(f"bilinear_sample: map must be (H, W, C), got {map_.shape}")
    from . import ops

    n = points.shape[0] if isinstance(points, Tensor) else np.asarray(points).shape[0]
    stacked = ops.reshape(map_, (1,) + map_.shape)
    return sample_maps(stacked, np.zeros(n, dtype=np.int64), points)
