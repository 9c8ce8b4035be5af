"""Central-finite-difference verification of every gradient path.

Each check builds a scalar loss from random inputs, takes analytic gradients
off the tape, and compares them against (L(x+eps) - L(x-eps)) / 2eps on a
handful of randomly chosen coordinates. Everything runs in 64-bit, where
central differences are good to ~1e-9 and the pass bar of 1e-4 relative
error leaves a wide margin.

The end-to-end checks probe a tiny full model (4x4 BEV, 2 cameras, 16x16
images) with directional derivatives over the whole parameter vector plus a
few single-coordinate probes.
"""
from __future__ import annotations

import numpy as np

from . import nd
from .attention import (
    BevSelfAttention,
    InterCameraAttention,
    SpatialCrossAttention,
)
from .config import RunConfig
from .geometry import BEVGridSpec, make_camera, precompute_projection_table
from .heads import FOCAL_ALPHA, FOCAL_GAMMA, LossWeights, focal_loss, total_loss
from .model import Model
from .nd import ParamStore, Tensor, ops

EPS = 1.0e-6
TOL = 1.0e-4


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0e-8)


def _fd_check(forward, params, rng, coords: int = 3, eps: float = EPS) -> float:
    """Max relative error between tape gradients and central differences.

    `forward` must be pure and re-runnable; `params` are the tensors whose
    gradients get probed, `coords` random coordinates each.
    """
    with nd.Tape() as tape:
        loss = forward()
    grads = tape.grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        k = min(coords, p.data.size)
        for i in rng.choice(p.data.size, size=k, replace=False):
            saved = p.data.flat[i]
            p.data.flat[i] = saved + eps
            up = float(forward().data)
            p.data.flat[i] = saved - eps
            down = float(forward().data)
            p.data.flat[i] = saved
            fd = (up - down) / (2.0 * eps)
            worst = max(worst, _rel(fd, float(g.data.flat[i])))
    return worst


def _away_from_kinks(x: np.ndarray, margin: float = 0.2) -> np.ndarray:
    """Push values away from zero so relu finite differences stay one-sided."""
    return x + margin * np.sign(x) + (x == 0.0) * margin


def _scalarize(t: Tensor, rng) -> Tensor:
    return nd.sum_(nd.mul(t, Tensor(rng.normal(size=t.shape))))


# ---------------------------------------------------------------------------
# individual checks; each returns the worst relative error it saw


def _check_simple_ops(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    r = rng.normal(size=(3, 4))
    out = {}
    for name, fwd in {
        "add": lambda: nd.sum_(nd.mul(nd.add(a, b), Tensor(r))),
        "sub": lambda: nd.sum_(nd.mul(nd.sub(a, b), Tensor(r))),
        "mul": lambda: nd.sum_(nd.mul(nd.mul(a, b), Tensor(r))),
        "scale": lambda: nd.sum_(nd.mul(nd.scale(a, -0.37), Tensor(r))),
    }.items():
        out[name] = _fd_check(fwd, [a, b], rng)
    return out


def _check_activations(rng):
    x = Tensor(_away_from_kinks(rng.normal(size=(4, 5))), requires_grad=True)
    r = rng.normal(size=(4, 5))
    pos = Tensor(np.abs(rng.normal(size=(4, 5))) + 0.3, requires_grad=True)
    out = {}
    for name, fwd, p in (
        ("relu", lambda: nd.sum_(nd.mul(nd.relu(x), Tensor(r))), x),
        ("tanh", lambda: nd.sum_(nd.mul(nd.tanh(x), Tensor(r))), x),
        ("sigmoid", lambda: nd.sum_(nd.mul(nd.sigmoid(x), Tensor(r))), x),
        ("softplus", lambda: nd.sum_(nd.mul(nd.softplus(x), Tensor(r))), x),
        ("pow_const", lambda: nd.sum_(nd.mul(nd.pow_const(pos, 1.7), Tensor(r))), pos),
    ):
        out[name] = _fd_check(fwd, [p], rng)
    return out


def _check_matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    r = rng.normal(size=(3, 5))
    return _fd_check(lambda: nd.sum_(nd.mul(nd.matmul(a, b), Tensor(r))), [a, b], rng)


def _check_reductions(rng):
    x = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    r1 = rng.normal(size=(3, 5))
    r2 = rng.normal(size=(3, 1, 5))
    return {
        "sum": _fd_check(
            lambda: nd.sum_(nd.mul(nd.sum_(x, axis=1), Tensor(r1))), [x], rng
        ),
        "mean": _fd_check(
            lambda: nd.sum_(nd.mul(nd.mean(x, axis=1, keepdims=True), Tensor(r2))),
            [x],
            rng,
        ),
    }


def _check_softmax(rng):
    x = Tensor(rng.normal(size=(6, 7)), requires_grad=True)
    r = rng.normal(size=(6, 7))
    return _fd_check(lambda: nd.sum_(nd.mul(nd.softmax(x, axis=-1), Tensor(r))), [x], rng)


def _check_layernorm(rng):
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    g = Tensor(rng.normal(size=(8,)) + 1.0, requires_grad=True)
    b = Tensor(rng.normal(size=(8,)), requires_grad=True)
    r = rng.normal(size=(5, 8))
    return _fd_check(
        lambda: nd.sum_(nd.mul(nd.layernorm(x, g, b), Tensor(r))), [x, g, b], rng
    )


def _check_rearrange(rng):
    x = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    y = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    r = rng.normal(size=(5, 2, 12))

    def fwd():
        t = nd.transpose(nd.concat([x, y], axis=1), (2, 0, 1))  # (5, 3, 8)
        t = nd.slice_(t, (slice(None), slice(0, 2)))  # (5, 2, 8)
        t = nd.reshape(t, (5, 2, 8))
        pad = nd.concat([t, nd.scale(t, 0.5)], axis=2)  # (5, 2, 16)
        return nd.sum_(nd.mul(nd.slice_(pad, (slice(None), slice(None), slice(2, 14))), Tensor(r)))

    return _fd_check(fwd, [x, y], rng)


def _check_gather_scatter(rng):
    x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    idx = np.array([0, 2, 2, 5, 1])
    seg = np.array([0, 0, 1, 3, 3])
    r = rng.normal(size=(4, 4))

    def fwd():
        rows = nd.take_rows(x, idx)
        return nd.sum_(nd.mul(nd.segment_sum(rows, seg, 4), Tensor(r)))

    return _fd_check(fwd, [x], rng)


def _check_weighted_sum(rng):
    v = Tensor(rng.normal(size=(5, 6, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    r = rng.normal(size=(5, 3))
    return _fd_check(
        lambda: nd.sum_(nd.mul(nd.weighted_sum(v, w), Tensor(r))), [v, w], rng
    )


def _check_conv(rng, stride):
    x = Tensor(_away_from_kinks(rng.normal(size=(2, 6, 8, 3))), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 3, 3, 4)) * 0.4, requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    out_hw = (6, 8) if stride == 1 else (3, 4)
    r = rng.normal(size=(2, *out_hw, 4))
    return _fd_check(
        lambda: nd.sum_(nd.mul(nd.conv2d(x, k, b, stride=stride, padding=1), Tensor(r))),
        [x, k, b],
        rng,
    )


def _check_batchnorm(rng):
    x = Tensor(rng.normal(size=(2, 4, 5, 3)), requires_grad=True)
    g = Tensor(rng.normal(size=(3,)) + 1.0, requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    r = rng.normal(size=(2, 4, 5, 3))

    def fwd():
        y, _mu, _var = nd.batchnorm_train(x, g, b)
        return nd.sum_(nd.mul(y, Tensor(r)))

    return _fd_check(fwd, [x, g, b], rng)


def _check_upsample(rng):
    x = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    r = rng.normal(size=(6, 8, 5))
    return _fd_check(
        lambda: nd.sum_(nd.mul(nd.upsample_bilinear(x, 2), Tensor(r))), [x], rng
    )


def _interior_points(rng, n, w, h):
    """Continuous pixel points with fractional parts well inside each texel."""
    xs = rng.integers(0, w - 1, size=n) + rng.uniform(0.25, 0.75, size=n)
    ys = rng.integers(0, h - 1, size=n) + rng.uniform(0.25, 0.75, size=n)
    return np.stack([xs, ys], axis=1)


def _check_sample_maps(rng):
    maps = Tensor(rng.normal(size=(2, 5, 7, 3)), requires_grad=True)
    pts = Tensor(_interior_points(rng, 9, 7, 5), requires_grad=True)
    midx = rng.integers(0, 2, size=9)
    r = rng.normal(size=(9, 3))
    return _fd_check(
        lambda: nd.sum_(nd.mul(nd.sample_maps(maps, midx, pts), Tensor(r))),
        [maps, pts],
        rng,
    )


def _check_attn_sample(rng):
    maps = Tensor(rng.normal(size=(2, 5, 7, 3)), requires_grad=True)
    pts = Tensor(_interior_points(rng, 12, 7, 5).reshape(4, 3, 2), requires_grad=True)
    wgt = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    midx = rng.integers(0, 2, size=12)
    r = rng.normal(size=(4, 3))
    return _fd_check(
        lambda: nd.sum_(nd.mul(nd.attn_sample(maps, midx, pts, wgt), Tensor(r))),
        [maps, pts, wgt],
        rng,
    )


def _check_focal(rng, gamma):
    logits = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
    target = (rng.random((6, 6)) < 0.3).astype(np.float64)
    return _fd_check(
        lambda: focal_loss(logits, target, gamma=gamma, a_f=FOCAL_ALPHA),
        [logits],
        rng,
        coords=5,
    )


def _check_total_loss(rng):
    main = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
    aux = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
    target = (rng.random((8, 8)) < 0.3).astype(np.float64)
    weights = LossWeights(alpha=0.7, gamma=FOCAL_GAMMA, a_f=FOCAL_ALPHA, lambdas=(1.3,))

    def fwd():
        loss, _m, _a = total_loss([main], [[aux]], [target], weights)
        return loss

    return _fd_check(fwd, [main, aux], rng, coords=5)


def _check_intercam(rng, conventional):
    store = ParamStore(dtype=np.float64)
    attn = InterCameraAttention(
        store, "t", n_cameras=2, channels=8, rng=rng, conventional=conventional
    )
    feats = Tensor(rng.normal(size=(2, 6, 8, 8)), requires_grad=True)
    r = rng.normal(size=(2, 6, 8, 8))
    params = [feats] + list(store.trainable().values())
    return _fd_check(
        lambda: nd.sum_(nd.mul(attn(feats), Tensor(r))), params, rng, coords=2
    )


def _check_bev_self(rng):
    store = ParamStore(dtype=np.float64)
    attn = BevSelfAttention(store, "t", channels=8, rng=rng, z_samples=4)
    q = Tensor(rng.normal(size=(6, 6, 8)), requires_grad=True)
    r = rng.normal(size=(6, 6, 8))
    params = [q] + list(store.trainable().values())
    return _fd_check(
        lambda: nd.sum_(nd.mul(attn(q), Tensor(r))), params, rng, coords=2
    )


def _tiny_rig(n_cameras=2, width=16, height=16):
    yaws = np.linspace(0.0, 360.0, n_cameras, endpoint=False)
    return [
        make_camera(float(y), (0.0, 0.0, 1.6), 8.0, 8.0, width, height) for y in yaws
    ]


def _check_cross(rng):
    grid = BEVGridSpec(4, 4, 8.0, 8.0, 8)
    cams = _tiny_rig()
    table = precompute_projection_table(grid, cams, 1)
    store = ParamStore(dtype=np.float64)
    attn = SpatialCrossAttention(
        store, "t", n_cameras=2, n_levels=2, channels=8, rng=rng, z_samples=4
    )
    q = Tensor(rng.normal(size=(4, 4, 8)), requires_grad=True)
    feats = [
        Tensor(rng.normal(size=(2, 4, 4, 8)), requires_grad=True),
        Tensor(rng.normal(size=(2, 2, 2, 8)), requires_grad=True),
    ]
    cells, _cams = table.flat_hits(1)
    if cells.size == 0:
        raise RuntimeError("tiny rig produced no hit pairs; check geometry")
    r = rng.normal(size=(4, 4, 8))
    params = [q] + feats + list(store.trainable().values())
    return _fd_check(
        lambda: nd.sum_(nd.mul(attn(q, feats, table, 1), Tensor(r))),
        params,
        rng,
        coords=2,
    )


def _tiny_model(seed: int) -> tuple[Model, np.ndarray, np.ndarray]:
    cfg = RunConfig(
        bev_cells=4,
        bev_extent_m=8.0,
        channels=8,
        image_height=16,
        image_width=16,
        precision="f64",
        seed=seed,
    )
    model = Model(cfg, _tiny_rig())
    rng = np.random.default_rng(seed + 1)
    # Shift every parameter off its init point. Fresh init leaves exact-zero
    # activations (dead relu channels feeding zero-beta batchnorm), and finite
    # differences straddle those kinks; a generic point has none.
    for _name, p in sorted(model.store.trainable().items()):
        p.data += rng.normal(0.0, 0.03, size=p.shape)
    images = rng.random((2, 16, 16, 3))
    target = (rng.random((4, 4)) < 0.4).astype(np.float64)
    return model, images, target


def _check_model_direction(rng, seed):
    """Directional derivative over the full parameter vector of a tiny model."""
    model, images, target = _tiny_model(seed)
    params = list(model.store.trainable().values())

    def loss_value():
        loss, *_ = model.sample_loss(images, target, train=True, sink=[])
        return float(loss.data)

    with nd.Tape() as tape:
        loss, *_ = model.sample_loss(images, target, train=True, sink=[])
    grads = tape.grad(loss, params)

    direction = [rng.normal(size=p.shape) for p in params]
    norm = np.sqrt(sum(float((d * d).sum()) for d in direction))
    direction = [d / norm for d in direction]
    analytic = sum(float((g.data * d).sum()) for g, d in zip(grads, direction))

    eps = 1.0e-5
    for p, d in zip(params, direction):
        p.data += eps * d
    up = loss_value()
    for p, d in zip(params, direction):
        p.data -= 2.0 * eps * d
    down = loss_value()
    for p, d in zip(params, direction):
        p.data += eps * d
    return _rel((up - down) / (2.0 * eps), analytic)


def _check_model_coords(rng, seed):
    """Single-coordinate probes on a handful of named tiny-model parameters."""
    model, images, target = _tiny_model(seed)
    store = model.store
    names = sorted(store.trainable())
    picks = [names[i] for i in rng.choice(len(names), size=6, replace=False)]
    params = [store[n] for n in picks]

    def fwd():
        loss, *_ = model.sample_loss(images, target, train=True, sink=[])
        return loss

    return _fd_check(fwd, params, rng, coords=1, eps=1.0e-5)


# ---------------------------------------------------------------------------
# suite driver


def run_suite(seed: int = 0, tol: float = TOL, include_model: bool = True):
    """All checks; returns (report lines, everything passed)."""
    results: list[tuple[str, float]] = []
    with nd.dtype_scope(np.float64):
        rng = np.random.default_rng(seed)
        for name, err in _check_simple_ops(rng).items():
            results.append((name, err))
        for name, err in _check_activations(rng).items():
            results.append((name, err))
        results.append(("matmul", _check_matmul(rng)))
        for name, err in _check_reductions(rng).items():
            results.append((name, err))
        results.append(("softmax", _check_softmax(rng)))
        results.append(("layernorm", _check_layernorm(rng)))
        results.append(("reshape/transpose/concat/slice", _check_rearrange(rng)))
        results.append(("take_rows/segment_sum", _check_gather_scatter(rng)))
        results.append(("weighted_sum", _check_weighted_sum(rng)))
        results.append(("conv2d stride 1", _check_conv(rng, 1)))
        results.append(("conv2d stride 2", _check_conv(rng, 2)))
        results.append(("batchnorm train", _check_batchnorm(rng)))
        results.append(("upsample bilinear", _check_upsample(rng)))
        results.append(("sample_maps", _check_sample_maps(rng)))
        results.append(("attn_sample", _check_attn_sample(rng)))
        results.append(("focal gamma 2", _check_focal(rng, FOCAL_GAMMA)))
        results.append(("focal gamma 0", _check_focal(rng, 0.0)))
        results.append(("total_loss", _check_total_loss(rng)))
        results.append(("inter-camera attention", _check_intercam(rng, False)))
        results.append(("inter-camera conventional", _check_intercam(rng, True)))
        results.append(("bev self-attention", _check_bev_self(rng)))
        results.append(("spatial cross-attention", _check_cross(rng)))
        if include_model:
            for i in range(3):
                results.append(
                    (f"tiny model direction {i}", _check_model_direction(rng, seed + i))
                )
            results.append(("tiny model coordinates", _check_model_coords(rng, seed)))

    lines = []
    all_ok = True
    for name, err in results:
        ok = err <= tol
        all_ok &= ok
        lines.append(f"{'ok  ' if ok else 'FAIL'} {name:32s} max_rel {err:.3e}")
    lines.append(f"{len(results)} checks, tolerance {tol:g}: "
                 f"{'all passed' if all_ok else 'FAILURES PRESENT'}")
    return lines, all_ok
