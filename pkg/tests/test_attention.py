"""Deformable attention blocks against scalar enumeration references."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bevrefine.nd as nd
from bevrefine.attention import (
    DELTA,
    BevSelfAttention,
    InterCameraAttention,
    SpatialCrossAttention,
    clamp_offsets,
    head_reference_points,
    sinusoidal_pos_embed,
)
from bevrefine.geometry import BEVGridSpec, make_camera, precompute_projection_table
from bevrefine.nd import ParamStore, Tensor

from oracles import bev_self_oracle, cross_attn_oracle, intercam_oracle


def small_table(n_cams=2, cells=4, extent=8.0, levels=1):
    grid = BEVGridSpec(cells, cells, extent, extent, 8)
    cams = [
        make_camera(i * 180.0, (0.0, 0.0, 1.6), fx=8.0, fy=8.0, width=16, height=16)
        for i in range(n_cams)
    ]
    return grid, cams, precompute_projection_table(grid, cams, levels)


class TestReferencePattern:
    def test_points_partition_the_unit_square(self):
        pts = head_reference_points()
        assert pts.shape == (8, 4, 2)
        assert (pts > 0).all() and (pts < 1).all()
        # each head's four points stay inside that head's region of the 2x4 split
        for h in range(8):
            row, col = divmod(h, 4)
            assert (pts[h, :, 0] > col / 4).all() and (pts[h, :, 0] < (col + 1) / 4).all()
            assert (pts[h, :, 1] > row / 2).all() and (pts[h, :, 1] < (row + 1) / 2).all()
        flat = pts.reshape(32, 2)
        assert len({tuple(p) for p in flat}) == 32
        np.testing.assert_allclose(flat.mean(axis=0), [0.5, 0.5])

    def test_positions_embed_axiswise(self):
        a = sinusoidal_pos_embed([[3.0, 5.0]], 16)[0]
        b = sinusoidal_pos_embed([[3.0, 9.0]], 16)[0]
        c = sinusoidal_pos_embed([[7.0, 5.0]], 16)[0]
        np.testing.assert_array_equal(a[:8], b[:8])  # x half ignores y
        np.testing.assert_array_equal(a[8:], c[8:])  # y half ignores x
        assert not np.array_equal(a, b) and not np.array_equal(a, c)

    def test_pos_embed_needs_mod4_channels(self):
        with pytest.raises(nd.ShapeError):
            sinusoidal_pos_embed([[0.0, 0.0]], 10)

    def test_clamp_bounds_offsets(self, f64):
        raw = Tensor(np.array([-50.0, -0.3, 0.0, 0.3, 50.0]))
        out = clamp_offsets(raw).data
        assert (np.abs(out) <= DELTA).all()
        np.testing.assert_allclose(out[2], 0.0)
        assert out[0] < out[1] < out[3] < out[4]
        with pytest.raises(ValueError):
            clamp_offsets(raw, delta=0.0)


class TestInterCamera:
    @pytest.mark.parametrize("conventional", [False, True])
    def test_matches_enumeration_oracle(self, rng, f64, conventional):
        for draw in range(3):
            store = ParamStore(dtype=np.float64)
            mod = InterCameraAttention(store, "ic", 2, 8, rng, conventional=conventional)
            feats = rng.normal(size=(2, 3, 5, 8))
            got = mod(Tensor(feats)).data
            want = intercam_oracle(store, "ic", feats, conventional=conventional)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_weight_groups_and_offset_bound(self, rng, f64):
        store = ParamStore(dtype=np.float64)
        mod = InterCameraAttention(store, "ic", 3, 8, rng)
        mod(Tensor(rng.normal(size=(3, 4, 4, 8)) * 3))
        sums = mod.last_weights.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert (np.abs(mod.last_offsets) <= DELTA).all()

    def test_shape_preserved_and_validated(self, rng, f64):
        store = ParamStore(dtype=np.float64)
        mod = InterCameraAttention(store, "ic", 2, 8, rng)
        out = mod(Tensor(rng.normal(size=(2, 4, 6, 8))))
        assert out.shape == (2, 4, 6, 8)
        with pytest.raises(nd.ShapeError):
            mod(Tensor(rng.normal(size=(3, 4, 6, 8))))

    def test_conventional_has_no_camera_embedding(self, rng):
        store = ParamStore()
        InterCameraAttention(store, "ic", 2, 8, rng, conventional=True)
        assert "ic.cam" not in store
        store2 = ParamStore()
        InterCameraAttention(store2, "ic", 2, 8, rng)
        assert "ic.cam" in store2


class TestBevSelf:
    def test_matches_enumeration_oracle(self, rng, f64):
        for draw in range(3):
            store = ParamStore(dtype=np.float64)
            mod = BevSelfAttention(store, "sa", 8, rng)
            qm = rng.normal(size=(4, 6, 8))
            got = mod(Tensor(qm)).data
            want = bev_self_oracle(store, "sa", qm)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_weight_groups_normalize(self, rng, f64):
        store = ParamStore(dtype=np.float64)
        mod = BevSelfAttention(store, "sa", 8, rng)
        mod(Tensor(rng.normal(size=(5, 5, 8)) * 2))
        np.testing.assert_allclose(mod.last_weights.sum(axis=-1), 1.0, atol=1e-6)


class TestSpatialCross:
    def test_matches_enumeration_oracle(self, rng, f64):
        grid, cams, table = small_table()
        for draw in range(3):
            store = ParamStore(dtype=np.float64)
            mod = SpatialCrossAttention(store, "ca", 2, 2, 8, rng)
            qm = rng.normal(size=(4, 4, 8))
            feats = [rng.normal(size=(2, 4, 4, 8)), rng.normal(size=(2, 2, 2, 8))]
            got = mod(Tensor(qm), [Tensor(f) for f in feats], table, 1).data
            want = cross_attn_oracle(store, "ca", qm, feats, table, 1)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_unhit_cells_pass_through_exactly(self, rng, f64):
        grid, cams, table = small_table(n_cams=1)
        unhit = ~table.hit_mask(1).any(axis=1)
        assert unhit.any(), "fixture needs cells no camera sees"
        store = ParamStore(dtype=np.float64)
        mod = SpatialCrossAttention(store, "ca", 1, 1, 8, rng)
        qm = rng.normal(size=(4, 4, 8))
        out = mod(Tensor(qm), [Tensor(rng.normal(size=(1, 4, 4, 8)))], table, 1).data
        flat_in, flat_out = qm.reshape(16, 8), out.reshape(16, 8)
        np.testing.assert_array_equal(flat_out[unhit], flat_in[unhit])
        assert not np.allclose(flat_out[~unhit], flat_in[~unhit])

    def test_weight_groups_normalize_over_levels_and_anchors(self, rng, f64):
        grid, cams, table = small_table()
        store = ParamStore(dtype=np.float64)
        mod = SpatialCrossAttention(store, "ca", 2, 2, 8, rng)
        qm = rng.normal(size=(4, 4, 8))
        feats = [Tensor(rng.normal(size=(2, 4, 4, 8))), Tensor(rng.normal(size=(2, 2, 2, 8)))]
        mod(Tensor(qm), feats, table, 1)
        assert mod.last_weights.shape[-1] == 2 * 4  # levels x anchors jointly
        np.testing.assert_allclose(mod.last_weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_wrong_level_count_rejected(self, rng, f64):
        grid, cams, table = small_table()
        store = ParamStore(dtype=np.float64)
        mod = SpatialCrossAttention(store, "ca", 2, 2, 8, rng)
        with pytest.raises(nd.ShapeError):
            mod(Tensor(np.zeros((4, 4, 8))), [Tensor(np.zeros((2, 4, 4, 8)))], table, 1)


class TestNormalizationProperty:
    @settings(deadline=None, max_examples=10)
    @given(st.integers(0, 2**31 - 1))
    def test_intercam_weights_always_normalize(self, seed):
        rng = np.random.default_rng(seed)
        with nd.dtype_scope(np.float64):
            store = ParamStore(dtype=np.float64)
            mod = InterCameraAttention(store, "ic", 2, 8, rng)
            mod(Tensor(rng.normal(size=(2, 3, 3, 8)) * rng.uniform(0.1, 5)))
        np.testing.assert_allclose(mod.last_weights.sum(axis=-1), 1.0, atol=1e-6)
        assert (np.abs(mod.last_offsets) <= DELTA).all()
