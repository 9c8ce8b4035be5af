"""Gather/scatter kernels behind bilinear map sampling.

Numba-compiled when available (the hot path during training); a vectorized
numpy fallback keeps the package importable without it. Both paths implement
identical zero-padding bilinear semantics.
"""
from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco


@njit(cache=True, nogil=True)
def _sample_fwd_jit(maps, h, w, pts, midx, out):  # pragma: no cover - compiled
    n, c = out.shape
    for i in range(n):
        x = pts[i, 0]
        y = pts[i, 1]
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        fx = x - x0
        fy = y - y0
        base = midx[i] * h * w
        for dy in range(2):
            yy = y0 + dy
            if yy < 0 or yy >= h:
                continue
            wy = fy if dy == 1 else 1.0 - fy
            for dx in range(2):
                xx = x0 + dx
                if xx < 0 or xx >= w:
                    continue
                wt = wy * (fx if dx == 1 else 1.0 - fx)
                row = base + yy * w + xx
                for k in range(c):
                    out[i, k] += wt * maps[row, k]


@njit(cache=True, nogil=True)
def _sample_bwd_jit(maps, h, w, pts, midx, g, dmaps, dpts, need_maps, need_pts):  # pragma: no cover
    n, c = g.shape
    for i in range(n):
        x = pts[i, 0]
        y = pts[i, 1]
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        fx = x - x0
        fy = y - y0
        base = midx[i] * h * w
        gx = 0.0
        gy = 0.0
        for dy in range(2):
            yy = y0 + dy
            if yy < 0 or yy >= h:
                continue
            wy = fy if dy == 1 else 1.0 - fy
            sy = 1.0 if dy == 1 else -1.0
            for dx in range(2):
                xx = x0 + dx
                if xx < 0 or xx >= w:
                    continue
                wx = fx if dx == 1 else 1.0 - fx
                sx = 1.0 if dx == 1 else -1.0
                row = base + yy * w + xx
                wt = wy * wx
                dot = 0.0
                for k in range(c):
                    gk = g[i, k]
                    if need_maps:
                        dmaps[row, k] += wt * gk
                    dot += gk * maps[row, k]
                gx += sx * wy * dot
                gy += sy * wx * dot
        if need_pts:
            dpts[i, 0] = gx
            dpts[i, 1] = gy


@njit(cache=True, nogil=True)
def _attn_fwd_jit(maps, h, w, pts, midx, wgt, out, s_per_g):  # pragma: no cover - compiled
    groups = out.shape[0]
    c = out.shape[1]
    acc = np.empty(c, dtype=maps.dtype)
    for g in range(groups):
        for k in range(c):
            acc[k] = 0.0
        i0 = g * s_per_g
        for s in range(s_per_g):
            i = i0 + s
            wq = wgt[i]
            if wq == 0.0:
                continue
            x = pts[i, 0]
            y = pts[i, 1]
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            fx = x - x0
            fy = y - y0
            base = midx[i] * h * w
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= h:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= w:
                        continue
                    wt = wq * wy * (fx if dx == 1 else 1.0 - fx)
                    row = base + yy * w + xx
                    for k in range(c):
                        acc[k] += wt * maps[row, k]
        for k in range(c):
            out[g, k] = acc[k]


@njit(cache=True, nogil=True)
def _attn_bwd_jit(
    maps, h, w, pts, midx, wgt, g_out, dmaps, dpts, dwgt, need_maps, need_pts, s_per_g
):  # pragma: no cover - compiled
    groups = g_out.shape[0]
    c = g_out.shape[1]
    for g in range(groups):
        grow = g_out[g]
        i0 = g * s_per_g
        for s in range(s_per_g):
            i = i0 + s
            wq = wgt[i]
            x = pts[i, 0]
            y = pts[i, 1]
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            fx = x - x0
            fy = y - y0
            base = midx[i] * h * w
            gx = 0.0
            gy = 0.0
            gw = 0.0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= h:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                sy = 1.0 if dy == 1 else -1.0
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= w:
                        continue
                    wx = fx if dx == 1 else 1.0 - fx
                    sx = 1.0 if dx == 1 else -1.0
                    row = base + yy * w + xx
                    wt = wy * wx
                    dot = 0.0
                    if need_maps:
                        scale = wq * wt
                        for k in range(c):
                            gk = grow[k]
                            dmaps[row, k] += scale * gk
                            dot += gk * maps[row, k]
                    else:
                        for k in range(c):
                            dot += grow[k] * maps[row, k]
                    gw += wt * dot
                    gx += sx * wy * dot
                    gy += sy * wx * dot
            if need_pts:
                dpts[i, 0] = wq * gx
                dpts[i, 1] = wq * gy
            dwgt[i] = gw


def _corner_data(h, w, pts, midx):
    x0 = np.floor(pts[:, 0])
    y0 = np.floor(pts[:, 1])
    fx = pts[:, 0] - x0
    fy = pts[:, 1] - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    base = midx.astype(np.int64) * (h * w)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xx = x0 + dx
            yy = y0 + dy
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            row = np.where(ok, base + yy * w + xx, 0)
            wt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            corners.append((row, ok, wt * ok))
    return corners, fx, fy


def _sample_fwd_np(maps, h, w, pts, midx, out):
    corners, _, _ = _corner_data(h, w, pts, midx)
    for row, ok, wt in corners:
        out += maps[row] * (wt[:, None])


def _sample_bwd_np(maps, h, w, pts, midx, g, dmaps, dpts, need_maps, need_pts):
    corners, fx, fy = _corner_data(h, w, pts, midx)
    vals = [maps[row] * ok[:, None] for row, ok, _ in corners]
    if need_maps:
        for (row, ok, wt), _ in zip(corners, vals):
            np.add.at(dmaps, row[ok], (wt[:, None] * g)[ok])
    if need_pts:
        v00, v10, v01, v11 = vals
        dx = (1.0 - fy)[:, None] * (v10 - v00) + fy[:, None] * (v11 - v01)
        dy = (1.0 - fx)[:, None] * (v01 - v00) + fx[:, None] * (v11 - v10)
        dpts[:, 0] = (g * dx).sum(axis=1)
        dpts[:, 1] = (g * dy).sum(axis=1)


def _attn_fwd_np(maps, h, w, pts, midx, wgt, out, s_per_g):
    vals = np.zeros((pts.shape[0], maps.shape[1]), dtype=maps.dtype)
    _sample_fwd_np(maps, h, w, pts, midx, vals)
    g = out.shape[0]
    out += np.einsum(
        "gsc,gs->gc", vals.reshape(g, s_per_g, -1), wgt.reshape(g, s_per_g)
    )


def _attn_bwd_np(maps, h, w, pts, midx, wgt, g_out, dmaps, dpts, dwgt, need_maps, need_pts, s_per_g):
    vals = np.zeros((pts.shape[0], maps.shape[1]), dtype=maps.dtype)
    _sample_fwd_np(maps, h, w, pts, midx, vals)
    gexp = np.repeat(g_out, s_per_g, axis=0)
    dwgt[...] = (vals * gexp).sum(axis=1)
    scaled = gexp * wgt[:, None]
    tmp_maps = dmaps if need_maps else np.zeros_like(maps)
    tmp_pts = dpts if need_pts else np.zeros_like(pts)
    _sample_bwd_np(maps, h, w, pts, midx, scaled, tmp_maps, tmp_pts, need_maps, need_pts)


def sample_forward(maps, h, w, pts, midx):
    out = np.zeros((pts.shape[0], maps.shape[1]), dtype=maps.dtype)
    if pts.shape[0] == 0:
        return out
    if HAVE_NUMBA:
        _sample_fwd_jit(maps, h, w, pts, midx, out)
    else:
        _sample_fwd_np(maps, h, w, pts, midx, out)
    return out


def sample_backward(maps, h, w, pts, midx, g, need_maps, need_pts):
    dmaps = np.zeros_like(maps) if need_maps else None
    dpts = np.zeros_like(pts) if need_pts else None
    if pts.shape[0] == 0:
        return dmaps, dpts
    if HAVE_NUMBA:
        _sample_bwd_jit(
            maps, h, w, pts, midx, g,
            dmaps if need_maps else np.zeros((0, maps.shape[1]), dtype=maps.dtype),
            dpts if need_pts else np.zeros((0, 2), dtype=pts.dtype),
            need_maps, need_pts,
        )
    else:
        _sample_bwd_np(maps, h, w, pts, midx, g, dmaps, dpts, need_maps, need_pts)
    return dmaps, dpts


def attn_sample_forward(maps, h, w, pts, midx, wgt, groups, s_per_g):
    out = np.zeros((groups, maps.shape[1]), dtype=maps.dtype)
    if pts.shape[0] == 0:
        return out
    if HAVE_NUMBA:
        _attn_fwd_jit(maps, h, w, pts, midx, wgt, out, s_per_g)
    else:
        _attn_fwd_np(maps, h, w, pts, midx, wgt, out, s_per_g)
    return out


def attn_sample_backward(maps, h, w, pts, midx, wgt, g_out, need_maps, need_pts, s_per_g):
    dmaps = np.zeros_like(maps) if need_maps else None
    dpts = np.zeros_like(pts) if need_pts else None
    dwgt = np.zeros_like(wgt)
    if pts.shape[0] == 0:
        return dmaps, dpts, dwgt
    if HAVE_NUMBA:
        _attn_bwd_jit(
            maps, h, w, pts, midx, wgt, g_out,
            dmaps if need_maps else np.zeros((0, maps.shape[1]), dtype=maps.dtype),
            dpts if need_pts else np.zeros((0, 2), dtype=pts.dtype),
            dwgt, need_maps, need_pts, s_per_g,
        )
    else:
        _attn_bwd_np(
            maps, h, w, pts, midx, wgt, g_out, dmaps, dpts, dwgt,
            need_maps, need_pts, s_per_g,
        )
    return dmaps, dpts, dwgt
