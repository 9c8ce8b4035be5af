"""Prediction heads and training objectives.

The refined BEV feature map passes through a per-class convolutional header
and a small decoder producing one logit per cell; the coarsest refined query
map gets its own decoder (upsampling blocks) so it can be supervised at full
resolution.  Both branches use a class-balanced focal loss; evaluation is
thresholded-sigmoid IoU.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nd
from .nd import Tensor, ops
from .vfi import ConvBnRelu

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
IOU_THRESHOLD = 0.5


class ClassHeader:
    """Two channel-preserving conv-BN-relu blocks ahead of the decoder."""

    def __init__(self, store, prefix: str, channels: int, rng):
        self.blocks = [
            ConvBnRelu(store, f"{prefix}.c0", channels, channels, rng),
            ConvBnRelu(store, f"{prefix}.c1", channels, channels, rng),
        ]

    def __call__(self, x: Tensor, train: bool, sink: list | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, train, sink)
        return x


class MapDecoder:
    """conv-BN-relu then a 1x1 projection to a single logit channel."""

    def __init__(self, store, prefix: str, channels: int, rng):
        self.store = store
        self.prefix = prefix
        self.block = ConvBnRelu(store, f"{prefix}.c", channels, channels, rng)
        std = math.sqrt(1.0 / channels)
        store.create(f"{prefix}.out.k", rng.normal(0.0, std, size=(1, 1, channels, 1)))
        store.create(f"{prefix}.out.b", np.zeros(1))

    def __call__(self, x: Tensor, train: bool, sink: list | None = None) -> Tensor:
        x = self.block(x, train, sink)
        st, pre = self.store, self.prefix
        logits = nd.conv2d(x, st[f"{pre}.out.k"], st[f"{pre}.out.b"])
        return ops.reshape(logits, logits.shape[:2])


class AuxDecoder:
    """Upsample x2 -> conv -> BN -> relu blocks lifting a coarse query map to
    target resolution, then a 1x1 projection to logits."""

    def __init__(self, store, prefix: str, channels: int, n_blocks: int, rng):
        self.store = store
        self.prefix = prefix
        self.n_blocks = n_blocks
        self.blocks = [
            ConvBnRelu(store, f"{prefix}.u{i}", channels, channels, rng)
            for i in range(n_blocks)
        ]
        std = math.sqrt(1.0 / channels)
        store.create(f"{prefix}.out.k", rng.normal(0.0, std, size=(1, 1, channels, 1)))
        store.create(f"{prefix}.out.b", np.zeros(1))

    def __call__(self, x: Tensor, train: bool, sink: list | None = None) -> Tensor:
        for block in self.blocks:
            x = nd.upsample_bilinear(x, 2)
            x = block(x, train, sink)
        st, pre = self.store, self.prefix
        logits = nd.conv2d(x, st[f"{pre}.out.k"], st[f"{pre}.out.b"])
        return ops.reshape(logits, logits.shape[:2])


def focal_loss(logits: Tensor, target, gamma: float = FOCAL_GAMMA, a_f: float = FOCAL_ALPHA) -> Tensor:
    """Mean class-balanced focal loss of per-cell logits against a binary map.

    Written in terms of softplus/sigmoid so large-magnitude logits stay exact:
    log p_t never goes through a raw log(sigmoid).
    """
    logits = nd.as_tensor(logits)
    t = np.asarray(target)
    if t.shape != logits.shape:
        raise nd.ShapeError(f"target shape {t.shape} != logits shape {logits.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("focal loss target must be binary (0/1)")
    if gamma < 0:
        raise ValueError(f"focusing parameter must be >= 0, got {gamma}")
    dt = logits.dtype
    yp = Tensor(t.astype(dt))
    a_t = Tensor((a_f * t + (1.0 - a_f) * (1.0 - t)).astype(dt))

    # log p_t = -softplus(-x) on positives, -softplus(x) on negatives
    neg_log_pt = yp * ops.softplus(ops.scale(logits, -1.0)) + (
        Tensor(np.asarray(1.0, dtype=dt)) - yp
    ) * ops.softplus(logits)
    # 1 - p_t = 1 - sigmoid(x) on positives, sigmoid(x) on negatives
    s = ops.sigmoid(logits)
    one_minus_pt = yp + s - ops.scale(yp * s, 2.0)
    focal = ops.pow_const(one_minus_pt, gamma) if gamma != 0 else None
    per_cell = a_t * neg_log_pt if focal is None else a_t * focal * neg_log_pt
    return per_cell.mean()


@dataclass(frozen=True)
class LossWeights:
    """Balance terms of the training objective."""

    alpha: float = 1.0
    gamma: float = FOCAL_GAMMA
    a_f: float = FOCAL_ALPHA
    lambdas: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("aux balance alpha must be >= 0")
        if any(l <= 0 for l in self.lambdas):
            raise ValueError("per-class weights must be positive")
        if self.gamma < 0:
            raise ValueError("focusing parameter must be >= 0")


def total_loss(
    main_logits: list[Tensor],
    aux_logits: list[list[Tensor]],
    targets: list,
    weights: LossWeights,
) -> tuple[Tensor, float, float]:
    """Weighted sum over classes of main plus alpha-scaled auxiliary focal
    losses; returns (loss tensor, main value, aux value) for logging."""
    n = len(main_logits)
    if len(aux_logits) != n or len(targets) != n or len(weights.lambdas) != n:
        raise nd.ShapeError(
            f"class count mismatch: {n} main, {len(aux_logits)} aux, "
            f"{len(targets)} targets, {len(weights.lambdas)} weights"
        )
    total = None
    main_val = 0.0
    aux_val = 0.0
    for main, auxes, target, lam in zip(main_logits, aux_logits, targets, weights.lambdas):
        l_main = focal_loss(main, target, weights.gamma, weights.a_f)
        main_val += lam * l_main.item()
        term = l_main
        for aux in auxes:
            l_aux = focal_loss(aux, target, weights.gamma, weights.a_f)
            aux_val += lam * weights.alpha * l_aux.item()
            term = term + ops.scale(l_aux, weights.alpha)
        term = ops.scale(term, lam)
        total = term if total is None else total + term
    return total, main_val, aux_val


def iou_score(prediction, truth) -> float:
    """Intersection over union of two binary maps; both empty counts as 1."""
    p = np.asarray(prediction)
    g = np.asarray(truth)
    if p.shape != g.shape:
        raise nd.ShapeError(f"prediction shape {p.shape} != truth shape {g.shape}")
    for name, arr in (("prediction", p), ("truth", g)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary (0/1)")
    p = p.astype(bool)
    g = g.astype(bool)
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def binarize(logits) -> np.ndarray:
    """Thresholded sigmoid probabilities as a uint8 map."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    prob = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    return (prob >= IOU_THRESHOLD).astype(np.uint8)
