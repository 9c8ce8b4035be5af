"""Progressive multi-resolution refinement of learnable BEV query maps.

Refinement starts at the coarsest query map and walks toward the target
resolution: each level runs a fixed stack of encoder layers (deformable
self-attention, then spatial cross-attention into the camera features, then
a feed-forward block, all with post-residual layer norms), and the result is
bilinearly upsampled and added into the next finer level's initial map.
The final BEV feature map adds an upscaled copy of the refined coarsest map
onto the refined finest map, so coarse structure is carried twice: once
through the merge chain and once through this shortcut.
"""
from __future__ import annotations

import numpy as np

from . import nd
from .attention import (
    BevSelfAttention,
    SpatialCrossAttention,
    ffn,
    init_ffn,
    init_layernorm,
    layernorm,
)
from .nd import Tensor, ops

LAYERS_PER_LEVEL = 2


def init_query_pyramid(store, prefix: str, x_cells: int, y_cells: int, channels: int, n_levels: int, rng) -> list[str]:
    """Create the learnable initial query maps; returns their parameter names.

    Level s has extents (X / 2^(s-1), Y / 2^(s-1)); values are drawn from a
    zero-mean normal with std 0.02.
    """
    names = []
    for s in range(1, n_levels + 1):
        f = 2 ** (s - 1)
        if x_cells % f or y_cells % f:
            raise nd.ShapeError(
                f"grid {x_cells}x{y_cells} not divisible at pyramid level {s}"
            )
        name = f"{prefix}.q{s}"
        store.create(name, rng.normal(0.0, 0.02, size=(x_cells // f, y_cells // f, channels)))
        names.append(name)
    return names


def merge_maps(coarse: Tensor, fine: Tensor) -> Tensor:
    """Upsample the coarser map x2 and add it onto the finer map."""
    if coarse.ndim != 3 or fine.ndim != 3:
        raise nd.ShapeError("merge_maps expects rank-3 (X, Y, C) maps")
    if (2 * coarse.shape[0], 2 * coarse.shape[1]) != fine.shape[:2]:
        raise nd.ShapeError(
            f"merge_maps: fine extents {fine.shape[:2]} must be twice {coarse.shape[:2]}"
        )
    return nd.upsample_bilinear(coarse, 2) + fine


class EncoderLayer:
    """One refinement step of a query map at a fixed pyramid level."""

    def __init__(self, store, prefix: str, n_cameras: int, n_feat_levels: int, channels: int, rng, *, heads: int = 8, z_samples: int = 4):
        self.store = store
        self.prefix = prefix
        self.channels = channels
        self.self_attn = BevSelfAttention(
            store, f"{prefix}.sa", channels, rng, heads=heads, z_samples=z_samples
        )
        self.cross_attn = SpatialCrossAttention(
            store, f"{prefix}.ca", n_cameras, n_feat_levels, channels, rng,
            heads=heads, z_samples=z_samples,
        )
        init_ffn(store, f"{prefix}.ffn", channels, rng)
        init_layernorm(store, f"{prefix}.ln", channels)

    def __call__(self, q_map: Tensor, features: list[Tensor], table, level: int) -> Tensor:
        q = self.self_attn(q_map)
        q = self.cross_attn(q, features, table, level)
        rows, cols, c = q.shape
        x = ops.reshape(q, (rows * cols, c))
        x = layernorm(self.store, f"{self.prefix}.ln", x + ffn(self.store, f"{self.prefix}.ffn", x))
        return ops.reshape(x, (rows, cols, c))


class VtEncoder:
    """Per-level encoder stacks plus the merge chain and final fusion."""

    def __init__(
        self,
        store,
        prefix: str,
        x_cells: int,
        y_cells: int,
        channels: int,
        n_cameras: int,
        rng,
        *,
        n_levels: int = 3,
        layers_per_level: int = LAYERS_PER_LEVEL,
        n_feat_levels: int = 3,
        heads: int = 8,
        z_samples: int = 4,
        final_add: bool = True,
    ):
        self.store = store
        self.prefix = prefix
        self.n_levels = n_levels
        self.final_add = final_add and n_levels > 1
        self.query_names = init_query_pyramid(
            store, prefix, x_cells, y_cells, channels, n_levels, rng
        )
        self.stacks: dict[int, list[EncoderLayer]] = {}
        for s in range(1, n_levels + 1):
            self.stacks[s] = [
                EncoderLayer(
                    store, f"{prefix}.s{s}.l{i}", n_cameras, n_feat_levels, channels,
                    rng, heads=heads, z_samples=z_samples,
                )
                for i in range(layers_per_level)
            ]

    def initial_query(self, level: int) -> Tensor:
        return self.store[self.query_names[level - 1]]

    def refine(self, features: list[Tensor], table) -> tuple[Tensor, dict[int, Tensor]]:
        """Run all levels coarse-to-fine; returns (B, updated map per level)."""
        updated: dict[int, Tensor] = {}
        current = self.initial_query(self.n_levels)
        for s in range(self.n_levels, 0, -1):
            for layer in self.stacks[s]:
                current = layer(current, features, table, s)
            updated[s] = current
            if s > 1:
                current = merge_maps(current, self.initial_query(s - 1))
        bev = updated[1]
        if self.final_add:
            shortcut = nd.upsample_bilinear(updated[self.n_levels], 2 ** (self.n_levels - 1))
            bev = bev + shortcut
        return bev, updated
