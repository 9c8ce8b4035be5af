"""Deformable-attention building blocks of the view-transformation model.

Three variants share one sampling machinery but differ in where their
reference points come from and how weights are normalized:

* inter-camera attention over the image maps of all cameras, with a fixed
  head-partitioned reference-point pattern and tanh-bounded offsets;
* BEV self-attention sampling a value projection of the query map around each
  query cell;
* spatial cross-attention pulling image features along each BEV cell's pillar
  projections, averaged over the cameras that actually see the cell.

Offsets and weights always come from single-hidden-layer MLPs on the
position-embedded query; each weight group is softmax-normalized so it sums
to one.  The coordinate convention everywhere is (x, y) = (column, row), with
normalized image coordinates mapping to pixels via x_pix = x * W - 0.5.
"""
from __future__ import annotations

import math

import numpy as np

from . import nd
from .nd import Tensor, ops

DELTA = 0.25  # offset bound (normalized units) for the inter-camera variant
NUM_HEADS = 8
POINTS_PER_HEAD = 4

_REF_ROWS = 2
_REF_COLS = 4


def head_reference_points() -> np.ndarray:
    """(8, 4, 2) normalized (x, y) reference points, one disjoint region per head.

    The unit square is split into a 2x4 grid of head regions; each head's four
    points sit at the centers of its region's 2x2 sub-quadrants, so the union
    of all points tiles the image evenly.
    """
    pts = np.zeros((NUM_HEADS, POINTS_PER_HEAD, 2))
    for h in range(NUM_HEADS):
        row, col = divmod(h, _REF_COLS)
        k = 0
        for jy in range(2):
            for jx in range(2):
                x = (col + (jx + 0.5) / 2.0) / _REF_COLS
                y = (row + (jy + 0.5) / 2.0) / _REF_ROWS
                pts[h, k] = (x, y)
                k += 1
    return pts


def sinusoidal_pos_embed(positions, channels: int) -> np.ndarray:
    """Deterministic 2D sin/cos embedding, (N, 2) positions -> (N, channels).

    Half the channels encode x, half y; per axis the sin/cos pair frequencies
    run geometrically from 1 down to 1/10000.
    """
    if channels % 4:
        raise nd.ShapeError(f"pos embed needs channels divisible by 4, got {channels}")
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if pos.shape[-1] != 2:
        raise nd.ShapeError(f"positions must be (N, 2), got {pos.shape}")
    half = channels // 2
    npair = half // 2
    if npair > 1:
        freqs = np.power(10000.0, -np.arange(npair) / (npair - 1))
    else:
        freqs = np.ones(1)
    out = np.empty((pos.shape[0], channels))
    for axis in range(2):
        ang = pos[:, axis : axis + 1] * freqs[None, :]
        base = axis * half
        out[:, base : base + half : 2] = np.sin(ang)
        out[:, base + 1 : base + half : 2] = np.cos(ang)
    return out


def clamp_offsets(raw, delta: float = DELTA) -> Tensor:
    """Bound raw offsets to (-delta, delta) per coordinate via delta * tanh."""
    if delta <= 0:
        raise ValueError(f"offset bound must be positive, got {delta}")
    return ops.scale(ops.tanh(raw), delta)


# ---------------------------------------------------------------------------
# parameter helpers shared by the attention variants and the encoder blocks


def init_linear(store, name: str, n_in: int, n_out: int, rng, std: float | None = None):
    """Create weight+bias parameters for a dense layer."""
    if std is None:
        std = 1.0 / math.sqrt(n_in)
    store.create(f"{name}.w", rng.normal(0.0, std, size=(n_in, n_out)))
    store.create(f"{name}.b", np.zeros(n_out))


def linear(store, name: str, x) -> Tensor:
    return ops.matmul(x, store[f"{name}.w"]) + store[f"{name}.b"]


def init_mlp(store, name: str, n_in: int, hidden: int, n_out: int, rng, out_std: float = 0.02):
    """Single-hidden-layer relu MLP; near-zero output layer keeps early offsets small."""
    init_linear(store, f"{name}.h", n_in, hidden, rng, std=math.sqrt(2.0 / n_in))
    init_linear(store, f"{name}.o", hidden, n_out, rng, std=out_std)


def mlp(store, name: str, x) -> Tensor:
    return linear(store, f"{name}.o", ops.relu(linear(store, f"{name}.h", x)))


def init_layernorm(store, name: str, channels: int):
    store.create(f"{name}.g", np.ones(channels))
    store.create(f"{name}.b", np.zeros(channels))


def layernorm(store, name: str, x) -> Tensor:
    return ops.layernorm(x, store[f"{name}.g"], store[f"{name}.b"])


def init_ffn(store, name: str, channels: int, rng):
    """Position-wise feed-forward net, expansion factor 2."""
    init_linear(store, f"{name}.f1", channels, 2 * channels, rng, std=math.sqrt(2.0 / channels))
    init_linear(store, f"{name}.f2", 2 * channels, channels, rng)


def ffn(store, name: str, x) -> Tensor:
    return linear(store, f"{name}.f2", ops.relu(linear(store, f"{name}.f1", x)))


_POS_CACHE: dict = {}


def _grid_pos_embed(h: int, w: int, channels: int, dtype) -> np.ndarray:
    """(h*w, channels) embedding of all integer (x, y) positions, row-major."""
    key = (h, w, channels, np.dtype(dtype).str)
    hit = _POS_CACHE.get(key)
    if hit is None:
        ys, xs = np.mgrid[0:h, 0:w]
        pos = np.stack([xs.ravel(), ys.ravel()], axis=1)
        hit = sinusoidal_pos_embed(pos, channels).astype(dtype)
        _POS_CACHE[key] = hit
    return hit


class InterCameraAttention:
    """Multi-head deformable attention across all cameras of one feature level.

    Every pixel of every camera's map queries bilinear samples from all
    cameras at head-specific reference points plus bounded learned offsets;
    weights are normalized jointly over (reference point, camera) per head.
    The `conventional` switch reproduces the ordinary single-reference-point
    design: reference = the query pixel itself for every head, offsets
    unclamped, and no camera embeddings.
    """

    def __init__(
        self,
        store,
        prefix: str,
        n_cameras: int,
        channels: int,
        rng,
        *,
        heads: int = NUM_HEADS,
        points: int = POINTS_PER_HEAD,
        delta: float = DELTA,
        conventional: bool = False,
    ):
        if channels % 4:
            raise nd.ShapeError("channel dim must be divisible by 4")
        self.store = store
        self.prefix = prefix
        self.n_cameras = n_cameras
        self.channels = channels
        self.heads = heads
        self.points = points
        self.delta = delta
        self.conventional = conventional
        self.dtype = store.dtype
        c = channels
        groups = heads * points * n_cameras
        if not conventional:
            store.create(f"{prefix}.cam", rng.normal(0.0, 0.02, size=(n_cameras, c)))
        init_mlp(store, f"{prefix}.off", c, c, groups * 2, rng)
        init_mlp(store, f"{prefix}.wgt", c, c, groups, rng)
        init_linear(store, f"{prefix}.out", heads * c, c, rng)
        init_layernorm(store, f"{prefix}.ln1", c)
        init_ffn(store, f"{prefix}.ffn", c, rng)
        init_layernorm(store, f"{prefix}.ln2", c)

    def _base_points(self, h: int, w: int) -> np.ndarray:
        """Normalized base sample locations, (M or 1, heads*points*n_cams, 2)."""
        nc, hp = self.n_cameras, self.heads * self.points
        if self.conventional:
            ys, xs = np.mgrid[0:h, 0:w]
            q = np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1)
            base = np.tile(np.repeat(q, hp * nc, axis=0).reshape(h * w, hp * nc, 2), (nc, 1, 1))
        else:
            ref = head_reference_points().reshape(hp, 1, 2)
            base = np.broadcast_to(ref, (hp, nc, 2)).reshape(1, hp * nc, 2)
        return base.astype(self.dtype)

    def __call__(self, features: Tensor) -> Tensor:
        if features.ndim != 4:
            raise nd.ShapeError(f"expected (N_c, H, W, C), got {features.shape}")
        nc, h, w, c = features.shape
        if nc != self.n_cameras or c != self.channels:
            raise nd.ShapeError(
                f"attention built for {self.n_cameras} cameras x {self.channels} ch, "
                f"got {nc} x {c}"
            )
        st, pre = self.store, self.prefix
        m = nc * h * w
        hp = self.heads * self.points

        f3 = ops.reshape(features, (nc, h * w, c))
        pos = Tensor(_grid_pos_embed(h, w, c, self.dtype)[None])
        q3 = f3 + pos
        if not self.conventional:
            q3 = q3 + ops.reshape(st[f"{pre}.cam"], (nc, 1, c))
        q = ops.reshape(q3, (m, c))

        raw_off = ops.reshape(mlp(st, f"{pre}.off", q), (m, hp * nc, 2))
        off = clamp_offsets(raw_off, self.delta) if not self.conventional else raw_off
        base = Tensor(self._base_points(h, w))
        norm_pts = base + off
        scale_row = Tensor(np.asarray([w, h], dtype=self.dtype))
        half = Tensor(np.asarray([0.5, 0.5], dtype=self.dtype))
        pix = ops.reshape(norm_pts * scale_row - half, (m * self.heads, self.points * nc, 2))

        midx = np.tile(np.tile(np.arange(nc, dtype=np.int64), hp), m)
        logits = ops.reshape(mlp(st, f"{pre}.wgt", q), (m * self.heads, self.points * nc))
        weights = ops.softmax(logits, axis=-1)
        # kept for post-hoc inspection of the normalization/bound invariants
        self.last_offsets = off.data
        self.last_weights = weights.data
        head_out = ops.reshape(
            nd.attn_sample(features, midx, pix, weights), (m, self.heads * c)
        )

        attn = linear(st, f"{pre}.out", head_out)
        x = layernorm(st, f"{pre}.ln1", ops.reshape(features, (m, c)) + attn)
        x = layernorm(st, f"{pre}.ln2", x + ffn(st, f"{pre}.ffn", x))
        return ops.reshape(x, (nc, h, w, c))


class BevSelfAttention:
    """Deformable self-attention over one BEV query map.

    Each cell samples a linear value projection of the map at its own position
    plus Z learned per-head offsets (in cell units); weights are normalized
    over the Z samples per head.  Includes the residual + feed-forward block
    that completes the update.
    """

    def __init__(
        self,
        store,
        prefix: str,
        channels: int,
        rng,
        *,
        heads: int = NUM_HEADS,
        z_samples: int = 4,
    ):
        self.store = store
        self.prefix = prefix
        self.channels = channels
        self.heads = heads
        self.z = z_samples
        self.dtype = store.dtype
        c = channels
        init_linear(store, f"{prefix}.val", c, c, rng)
        init_mlp(store, f"{prefix}.off", c, c, heads * z_samples * 2, rng)
        init_mlp(store, f"{prefix}.wgt", c, c, heads * z_samples, rng)
        init_linear(store, f"{prefix}.out", heads * c, c, rng)
        init_layernorm(store, f"{prefix}.ln1", c)
        init_ffn(store, f"{prefix}.ffn", c, rng)
        init_layernorm(store, f"{prefix}.ln2", c)

    def __call__(self, q_map: Tensor) -> Tensor:
        if q_map.ndim != 3 or q_map.shape[2] != self.channels:
            raise nd.ShapeError(f"expected (X, Y, {self.channels}), got {q_map.shape}")
        rows, cols, c = q_map.shape
        st, pre = self.store, self.prefix
        m = rows * cols
        hz = self.heads * self.z

        qf = ops.reshape(q_map, (m, c))
        qe = qf + Tensor(_grid_pos_embed(rows, cols, c, self.dtype))

        value = ops.reshape(linear(st, f"{pre}.val", qf), (1, rows, cols, c))

        off = ops.reshape(mlp(st, f"{pre}.off", qe), (m, hz, 2))
        ys, xs = np.mgrid[0:rows, 0:cols]
        base = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(self.dtype)
        pts = ops.reshape(off + Tensor(base[:, None, :]), (m * self.heads, self.z, 2))

        logits = ops.reshape(mlp(st, f"{pre}.wgt", qe), (m * self.heads, self.z))
        weights = ops.softmax(logits, axis=-1)
        self.last_weights = weights.data
        head_out = ops.reshape(
            nd.attn_sample(value, np.zeros(m * hz, dtype=np.int64), pts, weights),
            (m, self.heads * c),
        )

        attn = linear(st, f"{pre}.out", head_out)
        x = layernorm(st, f"{pre}.ln1", qf + attn)
        x = layernorm(st, f"{pre}.ln2", x + ffn(st, f"{pre}.ffn", x))
        return ops.reshape(x, (rows, cols, c))


class SpatialCrossAttention:
    """Deformable cross-attention from BEV queries into the camera features.

    For each BEV cell the Z pillar projections into every hit camera anchor
    samples of value-projected features at all pyramid levels; per hit camera
    the (z, level) weights are softmax-normalized, per-camera results are
    averaged by 1/|V_hit|, and head outputs are projected and summed.  Cells
    seen by no camera pass through unchanged.
    """

    def __init__(
        self,
        store,
        prefix: str,
        n_cameras: int,
        n_levels: int,
        channels: int,
        rng,
        *,
        heads: int = NUM_HEADS,
        z_samples: int = 4,
    ):
        self.store = store
        self.prefix = prefix
        self.n_cameras = n_cameras
        self.n_levels = n_levels
        self.channels = channels
        self.heads = heads
        self.z = z_samples
        self.dtype = store.dtype
        c = channels
        per_cam = heads * n_levels * z_samples
        init_linear(store, f"{prefix}.val", c, c, rng)
        init_mlp(store, f"{prefix}.off", c, c, n_cameras * per_cam * 2, rng)
        init_mlp(store, f"{prefix}.wgt", c, c, n_cameras * per_cam, rng)
        init_linear(store, f"{prefix}.out", heads * c, c, rng)
        init_layernorm(store, f"{prefix}.ln", c)

    def __call__(self, q_map: Tensor, features: list[Tensor], table, level: int) -> Tensor:
        if q_map.ndim != 3 or q_map.shape[2] != self.channels:
            raise nd.ShapeError(f"expected (X, Y, {self.channels}), got {q_map.shape}")
        if len(features) != self.n_levels:
            raise nd.ShapeError(
                f"built for {self.n_levels} feature levels, got {len(features)}"
            )
        if level not in table.uv:
            raise nd.ShapeError(f"projection table has no level {level}")
        rows, cols, c = q_map.shape
        st, pre = self.store, self.prefix
        nc, heads, nl, z = self.n_cameras, self.heads, self.n_levels, self.z
        m = rows * cols

        qf = ops.reshape(q_map, (m, c))
        hit = table.hit_mask(level)
        if hit.shape[0] != m:
            raise nd.ShapeError(
                f"table level {level} covers {hit.shape[0]} cells, query map has {m}"
            )
        cells, cams = table.flat_hits(level)
        p = cells.shape[0]
        if p == 0:
            return q_map

        qe = qf + Tensor(_grid_pos_embed(rows, cols, c, self.dtype))
        pair_idx = cells * nc + cams

        raw_off = ops.reshape(mlp(st, f"{pre}.off", qe), (m * nc, heads * nl * z * 2))
        off = ops.reshape(ops.take_rows(raw_off, pair_idx), (p, heads, nl, z, 2))
        raw_w = ops.reshape(mlp(st, f"{pre}.wgt", qe), (m * nc, heads * nl * z))
        logits = ops.reshape(ops.take_rows(raw_w, pair_idx), (p * heads, nl * z))
        weights = ops.softmax(logits, axis=-1)
        self.last_weights = weights.data

        base = table.normalized(level)[cells, cams].astype(self.dtype)  # (p, z, 2)
        base_t = Tensor(base[:, None, :, :])

        head_sum = None
        for l, feat in enumerate(features):
            fnc, fh, fw, fc = feat.shape
            if fnc != nc or fc != c:
                raise nd.ShapeError(
                    f"feature level {l} shape {feat.shape} incompatible with "
                    f"{nc} cameras x {c} channels"
                )
            vflat = linear(st, f"{pre}.val", ops.reshape(feat, (fnc * fh * fw, c)))
            vmaps = ops.reshape(vflat, (fnc, fh, fw, c))
            off_l = ops.slice_(off, (slice(None), slice(None), l))  # (p, heads, z, 2)
            inv_size = Tensor(np.asarray([1.0 / fw, 1.0 / fh], dtype=self.dtype))
            pts_norm = off_l * inv_size + base_t
            scale_row = Tensor(np.asarray([fw, fh], dtype=self.dtype))
            half = Tensor(np.asarray([0.5, 0.5], dtype=self.dtype))
            pix = ops.reshape(pts_norm * scale_row - half, (p * heads, z, 2))
            midx = np.repeat(cams, heads * z)
            w_l = ops.slice_(weights, (slice(None), slice(l * z, (l + 1) * z)))
            contrib = nd.attn_sample(vmaps, midx, pix, w_l)
            head_sum = contrib if head_sum is None else head_sum + contrib

        head_out = ops.reshape(head_sum, (p, heads * c))

        counts = hit.sum(axis=1)
        inv = np.zeros(m, dtype=self.dtype)
        nz = counts > 0
        inv[nz] = 1.0 / counts[nz]
        summed = ops.segment_sum(head_out, cells, m)
        averaged = summed * Tensor(inv[:, None])
        attn = linear(st, f"{pre}.out", averaged)

        updated = layernorm(st, f"{pre}.ln", qf + attn)
        mask = Tensor(nz.astype(self.dtype)[:, None])
        keep = Tensor((~nz).astype(self.dtype)[:, None])
        out = updated * mask + qf * keep
        return ops.reshape(out, (rows, cols, c))
