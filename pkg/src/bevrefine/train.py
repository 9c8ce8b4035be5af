"""Mini-batch training and evaluation loops for one segmentation class.

One process, one optimizer. Per-op finite screening is switched off during
training for speed; instead the scalar loss of every sample is checked and a
non-finite value aborts with the optimizer step index. Batches may fan out
over worker threads (``BEVR_THREADS``); results are merged in fixed sample
order, so thread count never changes the numbers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import nd
from .heads import binarize, iou_score
from .nd.optim import adamw_step
from .vfi import drain_stats


class TrainAbort(RuntimeError):
    """Training stopped on a non-finite loss; `step` is the optimizer step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def thread_count() -> int:
    """Worker cap from BEVR_THREADS; defaults to 1 (fully deterministic)."""
    raw = os.environ.get("BEVR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"BEVR_THREADS must be an integer, got {raw!r}")
    return max(n, 1)


def class_pairs(samples, class_name: str) -> list:
    """(images, target) training pairs for one class, in dataset order."""
    pairs = []
    for i, sample in enumerate(samples):
        if class_name not in sample.maps:
            raise KeyError(f"sample {i} has no {class_name!r} map")
        pairs.append((sample.images, sample.maps[class_name].astype(np.float32)))
    return pairs


def _map_ordered(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def train_model(
    model,
    pairs: list,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    seed: int = 0,
    log=None,
    iou_stop: float | None = None,
) -> list[dict]:
    """Train in place; returns per-epoch history and logs tab-separated lines.

    Each history row / log line carries: epoch, mean main loss, mean auxiliary
    loss, and the IoU of the training-pass predictions at threshold 0.5.
    Stops early once `iou_stop` is reached, if given.
    """
    n = len(pairs)
    if n == 0:
        raise ValueError("no training samples")
    threads = thread_count()
    trainable = model.store.trainable()
    order_rng = np.random.default_rng(seed + 1017)
    history = []

    def one_sample(item):
        idx, scale = item
        images, target = pairs[idx]
        sink: list = []
        with nd.Tape() as tape:
            loss, main_val, aux_val, logits = model.sample_loss(
                images, target, train=True, sink=sink
            )
        loss_val = float(loss.data)
        grads = None
        if np.isfinite(loss_val):
            gmap = tape.gradients(loss)
            grads = {
                name: gmap[p.tape_id].data * scale
                for name, p in trainable.items()
                if p.tape_id in gmap
            }
        iou = iou_score(binarize(logits), target.astype(np.uint8))
        return loss_val, main_val, aux_val, iou, grads, sink

    prev_checks = nd.tensor._finite_checks
    nd.set_finite_checks(False)
    try:
        for epoch in range(1, epochs + 1):
            perm = order_rng.permutation(n)
            main_sum = aux_sum = 0.0
            iou_by_idx = np.zeros(n)
            for start in range(0, n, batch_size):
                batch = perm[start : start + batch_size]
                scale = 1.0 / len(batch)
                results = _map_ordered(
                    one_sample, [(int(i), scale) for i in batch], threads
                )
                acc: dict = {}
                step = model.store.step_count + 1
                for idx, (loss_val, main_val, aux_val, iou, grads, sink) in zip(
                    batch, results
                ):
                    if grads is None:
                        raise TrainAbort(
                            f"non-finite loss ({loss_val}) at step {step}", step
                        )
                    for name, g in grads.items():
                        if name in acc:
                            acc[name] += g
                        else:
                            acc[name] = g.copy()
                    drain_stats(model.store, sink)
                    main_sum += main_val
                    aux_sum += aux_val
                    iou_by_idx[idx] = iou
                adamw_step(
                    model.store, acc, lr, weight_decay=weight_decay, betas=betas
                )
            row = {
                "epoch": epoch,
                "main": main_sum / n,
                "aux": aux_sum / n,
                "iou": float(iou_by_idx.mean()),
            }
            history.append(row)
            if log is not None:
                log(f"{epoch}\t{row['main']:.6f}\t{row['aux']:.6f}\t{row['iou']:.4f}")
            if iou_stop is not None and row["iou"] >= iou_stop:
                break
    finally:
        nd.set_finite_checks(prev_checks)
    return history


def evaluate_model(model, pairs: list) -> list[float]:
    """Per-sample IoU of eval-mode predictions, in dataset order."""
    threads = thread_count()

    def one(pair):
        images, target = pair
        main, _aux = model.forward(images, train=False)
        return iou_score(binarize(main), np.asarray(target).astype(np.uint8))

    return _map_ordered(one, pairs, threads)
