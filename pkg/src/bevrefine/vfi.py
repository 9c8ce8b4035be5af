"""Camera-view feature extraction and interaction.

A small trained-from-scratch convolutional backbone emits three feature
scales (/4, /8, /16) per camera, channel-matched to the query dimension.
Two refinement stages follow: a per-camera top-down FPN pathway, then a
shared deformable attention block that lets every pixel of every camera
attend into all cameras at its level.
"""
from __future__ import annotations

import math

import numpy as np

from . import nd
from .attention import InterCameraAttention
from .nd import Tensor, ops

BN_MOMENTUM = 0.1
STAGE_CHANNELS = (16, 24, 32, 48)
NUM_LEVELS = 3


def apply_bn_update(store, prefix: str, mu: np.ndarray, var: np.ndarray) -> None:
    """Fold one batch's statistics into a block's running mean/variance."""
    rm = store[f"{prefix}.rm"].data
    rv = store[f"{prefix}.rv"].data
    rm *= 1.0 - BN_MOMENTUM
    rm += BN_MOMENTUM * mu.astype(rm.dtype)
    rv *= 1.0 - BN_MOMENTUM
    rv += BN_MOMENTUM * var.astype(rv.dtype)


def drain_stats(store, sink: list) -> None:
    """Apply queued batch-norm statistics in recorded order, then clear."""
    for prefix, mu, var in sink:
        apply_bn_update(store, prefix, mu, var)
    sink.clear()


class ConvBnRelu:
    """Conv (no bias) + batch norm + relu, the backbone/head building block."""

    def __init__(self, store, prefix: str, cin: int, cout: int, rng, *, ksize: int = 3, stride: int = 1):
        self.store = store
        self.prefix = prefix
        self.stride = stride
        self.pad = ksize // 2
        std = math.sqrt(2.0 / (ksize * ksize * cin))
        store.create(f"{prefix}.k", rng.normal(0.0, std, size=(ksize, ksize, cin, cout)))
        store.create(f"{prefix}.g", np.ones(cout))
        store.create(f"{prefix}.b", np.zeros(cout))
        store.create(f"{prefix}.rm", np.zeros(cout), trainable=False)
        store.create(f"{prefix}.rv", np.ones(cout), trainable=False)

    def __call__(self, x, train: bool, sink: list | None = None) -> Tensor:
        st, pre = self.store, self.prefix
        y = nd.conv2d(x, st[f"{pre}.k"], stride=self.stride, padding=self.pad)
        if train:
            y, mu, var = nd.batchnorm_train(y, st[f"{pre}.g"], st[f"{pre}.b"])
            if sink is None:
                apply_bn_update(st, pre, mu, var)
            else:
                sink.append((pre, mu, var))
        else:
            y = nd.batchnorm_eval(
                y, st[f"{pre}.g"], st[f"{pre}.b"], st[f"{pre}.rm"].data, st[f"{pre}.rv"].data
            )
        return ops.relu(y)


class Backbone:
    """Four stride-2 stages; the last three scales feed 1x1 channel projections."""

    def __init__(self, store, prefix: str, out_channels: int, rng):
        self.store = store
        self.prefix = prefix
        self.out_channels = out_channels
        self.blocks: list[list[ConvBnRelu]] = []
        cin = 3
        for i, cout in enumerate(STAGE_CHANNELS):
            stage = [
                ConvBnRelu(store, f"{prefix}.s{i}a", cin, cout, rng, stride=2),
                ConvBnRelu(store, f"{prefix}.s{i}b", cout, cout, rng),
            ]
            self.blocks.append(stage)
            cin = cout
        for lvl, cout in enumerate(STAGE_CHANNELS[1:]):
            std = math.sqrt(1.0 / cout)
            store.create(
                f"{prefix}.proj{lvl}.k", rng.normal(0.0, std, size=(1, 1, cout, out_channels))
            )
            store.create(f"{prefix}.proj{lvl}.b", np.zeros(out_channels))

    def __call__(self, images: Tensor, train: bool, sink: list | None = None) -> list[Tensor]:
        if images.ndim != 4 or images.shape[3] != 3:
            raise nd.ShapeError(f"expected (N_c, H, W, 3) images, got {images.shape}")
        h, w = images.shape[1], images.shape[2]
        if h % 16 or w % 16:
            raise nd.ShapeError(f"image size {h}x{w} must be divisible by 16")
        x = images
        raw = []
        for stage in self.blocks:
            for block in stage:
                x = block(x, train, sink)
            raw.append(x)
        out = []
        for lvl, feat in enumerate(raw[1:]):
            st, pre = self.store, self.prefix
            out.append(
                nd.conv2d(feat, st[f"{pre}.proj{lvl}.k"], st[f"{pre}.proj{lvl}.b"])
            )
        return out


class IntraCim:
    """Per-camera FPN: lateral 1x1s, top-down upsample-add, 3x3 smoothing."""

    def __init__(self, store, prefix: str, channels: int, rng, n_levels: int = NUM_LEVELS):
        self.store = store
        self.prefix = prefix
        self.n_levels = n_levels
        std1 = math.sqrt(1.0 / channels)
        std3 = math.sqrt(1.0 / (9 * channels))
        for lvl in range(n_levels):
            store.create(
                f"{prefix}.lat{lvl}.k", rng.normal(0.0, std1, size=(1, 1, channels, channels))
            )
            store.create(f"{prefix}.lat{lvl}.b", np.zeros(channels))
            store.create(
                f"{prefix}.smooth{lvl}.k",
                rng.normal(0.0, std3, size=(3, 3, channels, channels)),
            )
            store.create(f"{prefix}.smooth{lvl}.b", np.zeros(channels))

    def __call__(self, pyramid: list[Tensor]) -> list[Tensor]:
        if len(pyramid) != self.n_levels:
            raise nd.ShapeError(
                f"FPN built for {self.n_levels} levels, got {len(pyramid)}"
            )
        st, pre = self.store, self.prefix
        merged: list[Tensor | None] = [None] * self.n_levels
        for lvl in range(self.n_levels - 1, -1, -1):
            lat = nd.conv2d(pyramid[lvl], st[f"{pre}.lat{lvl}.k"], st[f"{pre}.lat{lvl}.b"])
            if lvl < self.n_levels - 1:
                lat = lat + nd.upsample_bilinear(merged[lvl + 1], 2)
            merged[lvl] = lat
        return [
            nd.conv2d(merged[lvl], st[f"{pre}.smooth{lvl}.k"], st[f"{pre}.smooth{lvl}.b"], padding=1)
            for lvl in range(self.n_levels)
        ]


class VfiModule:
    """Backbone -> per-camera FPN -> cross-camera attention, with the
    reduced configurations used by the ablations (no FPN / no inter-camera
    stage / conventional attention)."""

    def __init__(
        self,
        store,
        prefix: str,
        n_cameras: int,
        channels: int,
        rng,
        *,
        use_fpn: bool = True,
        use_inter: bool = True,
        conventional_inter: bool = False,
    ):
        self.backbone = Backbone(store, f"{prefix}.bb", channels, rng)
        self.fpn = IntraCim(store, f"{prefix}.fpn", channels, rng) if use_fpn else None
        self.inter = (
            InterCameraAttention(
                store,
                f"{prefix}.icim",
                n_cameras,
                channels,
                rng,
                conventional=conventional_inter,
            )
            if use_inter
            else None
        )

    def __call__(self, images: Tensor, train: bool, sink: list | None = None) -> list[Tensor]:
        pyramid = self.backbone(images, train, sink)
        if self.fpn is not None:
            pyramid = self.fpn(pyramid)
        if self.inter is not None:
            pyramid = [self.inter(f) for f in pyramid]
        return pyramid
