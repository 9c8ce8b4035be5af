"""Autodiff core: tensors, tape, ops, optimizer, checkpoint files."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bevrefine.nd as nd
from bevrefine.nd import ParamStore, Tape, Tensor, ops
from bevrefine.nd.checkpoint import CheckpointError

from oracles import bilinear_at


def tape_grad(build, params):
    with Tape() as tape:
        loss = build()
    return [g.data for g in tape.grad(loss, params)]


class TestTensorBasics:
    def test_dtype_rules(self):
        # non-float input takes the ambient default; float arrays pass through
        assert Tensor([1.0]).dtype == nd.default_dtype()
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
        assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32
        with pytest.raises(ValueError):
            Tensor(np.zeros(3, dtype=np.int32), dtype=np.int32)

    def test_dtype_scope(self):
        before = nd.default_dtype()
        with nd.dtype_scope(np.float32):
            assert Tensor([1.0]).dtype == np.float32
        assert nd.default_dtype() is before

    def test_operators_match_numpy(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_allclose((ta + tb).data, (a + b).astype(np.float32), rtol=1e-6)
        np.testing.assert_allclose((ta * tb).data, (a * b).astype(np.float32), rtol=1e-6)
        np.testing.assert_allclose((ta - tb).data, (a - b).astype(np.float32), rtol=1e-6)
        np.testing.assert_allclose((-ta).data, -a.astype(np.float32), rtol=1e-6)

    def test_finite_checks_toggle(self):
        bad = Tensor(np.array([1.0, np.inf]))
        with pytest.raises(nd.NumericFault):
            ops.add(bad, bad)
        nd.set_finite_checks(False)
        try:
            ops.add(bad, bad)  # screened off: no fault
        finally:
            nd.set_finite_checks(True)


class TestTape:
    def test_grad_of_composite(self, f64):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(x * x)
        (g,) = tape.grad(loss, [x])
        np.testing.assert_allclose(g.data, 2.0 * x.data)

    def test_untracked_leaf_gets_zero_grad(self, f64):
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(x)
        gx, gy = (g.data for g in tape.grad(loss, [x, y]))
        np.testing.assert_allclose(gx, np.ones(2))
        np.testing.assert_allclose(gy, np.zeros(2))

    def test_nonscalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(nd.TapeError):
            tape.gradients(y)

    def test_detached_loss_rejected(self):
        x = Tensor(np.ones(1), requires_grad=True)
        with Tape():
            pass
        with Tape() as other:
            pass
        with Tape() as tape:
            loss = ops.sum_(x)
        with pytest.raises(nd.TapeError):
            other.gradients(loss)

    def test_reused_leaf_accumulates(self, f64):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(x * x + x)
        (g,) = tape.grad(loss, [x])
        np.testing.assert_allclose(g.data, [5.0])

    def test_backward_consumes_tape(self, f64):
        # the node list pins every forward intermediate, so it must be freed
        # by the backward pass itself rather than lingering until gc
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(x * x)
        tape.gradients(loss)
        assert not tape._nodes
        with pytest.raises(nd.TapeError, match="consumed"):
            tape.gradients(loss)


class TestOpValues:
    def test_matmul(self, rng, f64):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_softmax_rows_normalize(self, rng, f64):
        x = rng.normal(size=(6, 9)) * 3
        y = ops.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(6), atol=1e-12)
        assert (y > 0).all()

    def test_layernorm_normalizes(self, rng, f64):
        x = rng.normal(size=(4, 16)) * 5 + 3
        y = ops.layernorm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)

    def test_rearrangers_match_numpy(self, rng, f64):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_array_equal(
            ops.transpose(Tensor(x), (2, 0, 1)).data, x.transpose(2, 0, 1)
        )
        np.testing.assert_array_equal(ops.reshape(Tensor(x), (6, 4)).data, x.reshape(6, 4))
        np.testing.assert_array_equal(
            ops.slice_(Tensor(x), (slice(1, 2), slice(None), slice(0, 2))).data,
            x[1:2, :, 0:2],
        )
        np.testing.assert_array_equal(
            ops.concat([Tensor(x), Tensor(x)], axis=1).data, np.concatenate([x, x], 1)
        )

    def test_take_rows_and_segment_sum(self, rng, f64):
        x = rng.normal(size=(5, 3))
        idx = np.array([4, 0, 0, 2], dtype=np.int64)
        np.testing.assert_array_equal(ops.take_rows(Tensor(x), idx).data, x[idx])
        seg = np.array([0, 2, 2, 1], dtype=np.int64)
        want = np.zeros((4, 3))
        np.add.at(want, seg, x[idx])
        np.testing.assert_allclose(ops.segment_sum(ops.take_rows(Tensor(x), idx), seg, 4).data, want)

    def test_conv2d_matches_direct_loops(self, rng, f64):
        imgs = rng.normal(size=(2, 5, 6, 3))
        kern = rng.normal(size=(3, 3, 3, 4))
        bias = rng.normal(size=4)
        for stride in (1, 2):
            got = nd.conv2d(
                Tensor(imgs), Tensor(kern), Tensor(bias), stride=stride, padding=1
            ).data
            pad = np.pad(imgs, ((0, 0), (1, 1), (1, 1), (0, 0)))
            oh, ow = got.shape[1:3]
            want = np.zeros((2, oh, ow, 4))
            for n in range(2):
                for i in range(oh):
                    for j in range(ow):
                        patch = pad[n, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        for co in range(4):
                            want[n, i, j, co] = (patch * kern[..., co]).sum() + bias[co]
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_upsample_preserves_constant_and_bounds(self, rng, f64):
        const = np.full((3, 5, 2), 1.25)
        up = nd.upsample_bilinear(Tensor(const), 2).data
        assert up.shape == (6, 10, 2)
        np.testing.assert_allclose(up, 1.25)
        x = rng.normal(size=(4, 4, 1))
        up = nd.upsample_bilinear(Tensor(x), 2).data
        assert up.shape == (8, 8, 1)
        # every fine pixel interpolates nearby coarse pixels: bounded by extremes
        assert up.max() <= x.max() + 1e-12 and up.min() >= x.min() - 1e-12

    def test_batchnorm_train_normalizes_batch(self, rng, f64):
        x = rng.normal(size=(40, 3)) * 4 + 7
        y, bm, bv = nd.batchnorm_train(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(y.data.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.data.var(axis=0), 1.0, atol=1e-3)
        np.testing.assert_allclose(bm, x.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(bv, x.var(axis=0), atol=1e-10)

    def test_batchnorm_eval_uses_running_stats(self, rng, f64):
        x = rng.normal(size=(7, 3))
        rm, rv = np.array([1.0, 2.0, 3.0]), np.array([4.0, 1.0, 0.25])
        y = nd.batchnorm_eval(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv).data
        want = (x - rm) / np.sqrt(rv + 1e-5)
        np.testing.assert_allclose(y, want, atol=1e-10)


class TestSampling:
    def test_bilinear_matches_scalar_oracle(self, rng, f64):
        maps = rng.normal(size=(2, 5, 7, 3))
        pts = np.column_stack(
            [rng.uniform(-1.5, 7.5, size=40), rng.uniform(-1.5, 5.5, size=40)]
        )
        midx = rng.integers(0, 2, size=40)
        got = nd.sample_maps(Tensor(maps), midx.astype(np.int64), Tensor(pts)).data
        for i in range(40):
            want = bilinear_at(maps[midx[i]], pts[i, 0], pts[i, 1])
            np.testing.assert_allclose(got[i], want, atol=1e-12)

    def test_far_outside_points_read_zero(self, f64):
        maps = np.ones((1, 4, 4, 2))
        pts = np.array([[-5.0, 2.0], [2.0, 9.0], [-1.0, -1.0]])
        got = nd.sample_maps(Tensor(maps), np.zeros(3, dtype=np.int64), Tensor(pts)).data
        np.testing.assert_allclose(got, 0.0)

    def test_attn_sample_equals_sample_plus_weighting(self, rng, f64):
        maps = Tensor(rng.normal(size=(3, 6, 5, 4)), requires_grad=True)
        g, s = 10, 6
        pts = Tensor(rng.uniform(-1, 6, size=(g, s, 2)), requires_grad=True)
        wgt = Tensor(rng.normal(size=(g, s)), requires_grad=True)
        midx = rng.integers(0, 3, size=g * s).astype(np.int64)

        with Tape() as tape:
            fused = nd.attn_sample(maps, midx, pts, wgt)
            loss = ops.sum_(fused * fused)
        g_fused = [t.data.copy() for t in tape.grad(loss, [maps, pts, wgt])]

        with Tape() as tape:
            flat = nd.sample_maps(maps, midx, ops.reshape(pts, (g * s, 2)))
            vals = ops.reshape(flat, (g, s, 4))
            ref = ops.weighted_sum(vals, wgt)
            loss = ops.sum_(ref * ref)
        g_ref = [t.data.copy() for t in tape.grad(loss, [maps, pts, wgt])]

        np.testing.assert_allclose(fused.data, ref.data, atol=1e-12)
        for a, b in zip(g_fused, g_ref):
            np.testing.assert_allclose(a, b, atol=1e-11)

    def test_attn_sample_group_shape_checks(self, f64):
        maps = Tensor(np.zeros((1, 4, 4, 2)))
        with pytest.raises(nd.ShapeError):
            nd.attn_sample(maps, np.zeros(5, dtype=np.int64), Tensor(np.zeros((2, 3, 2))), Tensor(np.zeros((2, 3))))
        with pytest.raises(nd.ShapeError):
            nd.attn_sample(maps, np.zeros(6, dtype=np.int64), Tensor(np.zeros((2, 3, 2))), Tensor(np.zeros((3, 2))))


class TestOptimizer:
    def test_adamw_matches_reference_formula(self, f64):
        store = ParamStore(dtype=np.float64)
        store.create("p", np.array([1.0, -2.0]))
        g1 = np.array([0.5, -1.0])
        g2 = np.array([-0.25, 0.75])
        lr, wd, b1, b2, eps = 1e-2, 1e-2, 0.9, 0.999, 1e-8

        p = np.array([1.0, -2.0])
        m = np.zeros(2)
        v = np.zeros(2)
        for t, g in ((1, g1), (2, g2)):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1**t)
            vh = v / (1 - b2**t)
            p = p - lr * wd * p
            p = p - lr * mh / (np.sqrt(vh) + eps)

        from bevrefine.nd.optim import adamw_step

        adamw_step(store, {"p": g1}, lr, weight_decay=wd)
        adamw_step(store, {"p": g2}, lr, weight_decay=wd)
        np.testing.assert_allclose(store["p"].data, p, atol=1e-14)
        assert store.step_count == 2

    def test_param_store_rejects_duplicates(self):
        store = ParamStore()
        store.create("a", np.zeros(2))
        with pytest.raises(ValueError):
            store.create("a", np.zeros(2))

    def test_non_trainable_buffers_not_optimized(self):
        store = ParamStore()
        store.create("w", np.ones(2))
        store.create("stat", np.ones(2), trainable=False)
        assert set(store.trainable()) == {"w"}
        assert store.num_elements() == 2
        assert store.num_elements(trainable_only=False) == 4


class TestCheckpoint:
    def _store(self):
        store = ParamStore()
        rng = np.random.default_rng(5)
        store.create("a.w", rng.normal(size=(3, 4)))
        store.create("b", rng.normal(size=7))
        store.moments("a.w")[0][...] = 0.25
        store.step_count = 11
        return store

    def test_round_trip_bit_exact(self, tmp_path):
        store = self._store()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nd.checkpoint.save(store, p1, extra=b"hello = 1\n")
        loaded, extra = nd.checkpoint.load(p1)
        assert extra == b"hello = 1\n"
        assert loaded.step_count == 11
        nd.checkpoint.save(loaded, p2, extra=extra)
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_and_moments_survive(self, tmp_path):
        store = self._store()
        path = tmp_path / "c.ckpt"
        nd.checkpoint.save(store, path)
        loaded, _ = nd.checkpoint.load(path)
        np.testing.assert_array_equal(loaded["a.w"].data, store["a.w"].data)
        np.testing.assert_array_equal(loaded.moments("a.w")[0], store.moments("a.w")[0])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE!" + b"\0" * 30)
        with pytest.raises(CheckpointError, match="magic"):
            nd.checkpoint.load(path)

    def test_truncation_reports_offset(self, tmp_path):
        store = self._store()
        path = tmp_path / "t.ckpt"
        nd.checkpoint.save(store, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="offset"):
            nd.checkpoint.load(path)


class TestProperties:
    @settings(deadline=None, max_examples=30)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_softmax_groups_sum_to_one(self, rows, cols, seed):
        x = np.random.default_rng(seed).normal(size=(rows, cols)) * 10
        with nd.dtype_scope(np.float64):
            y = ops.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)

    @settings(deadline=None, max_examples=30)
    @given(st.integers(1, 40), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_segment_sum_preserves_total(self, n, segments, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 3))
        seg = rng.integers(0, segments, size=n)
        with nd.dtype_scope(np.float64):
            y = ops.segment_sum(Tensor(x), seg.astype(np.int64), segments).data
        np.testing.assert_allclose(y.sum(axis=0), x.sum(axis=0), atol=1e-9)

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 2**31 - 1))
    def test_interior_bilinear_is_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        maps = rng.normal(size=(1, 6, 6, 1))
        pts = np.column_stack([rng.uniform(0, 5, 8), rng.uniform(0, 5, 8)])
        with nd.dtype_scope(np.float64):
            vals = nd.sample_maps(
                Tensor(maps), np.zeros(8, dtype=np.int64), Tensor(pts)
            ).data
        assert (vals <= maps.max() + 1e-9).all() and (vals >= maps.min() - 1e-9).all()
