"""Feature extraction, encoder pyramid, full model assembly, variants."""
import dataclasses

import numpy as np
import pytest

import bevrefine.nd as nd
from bevrefine.config import RunConfig
from bevrefine.geometry import desk_rig
from bevrefine.model import Model, transfer_state, variant_switches
from bevrefine.nd import ParamStore, Tensor
from bevrefine.nd.checkpoint import CheckpointError
from bevrefine.vfi import Backbone, ConvBnRelu, VfiModule, drain_stats
from bevrefine.vtencoder import VtEncoder, init_query_pyramid, merge_maps


def tiny_cfg(**kw):
    base = dict(
        bev_cells=16,
        bev_extent_m=16.0,
        channels=8,
        image_height=32,
        image_width=48,
        precision="f64",
        seed=3,
    )
    base.update(kw)
    return RunConfig(**base)


def tiny_model(**kw):
    cfg = tiny_cfg(**kw)
    return Model(cfg, desk_rig(width=cfg.image_width, height=cfg.image_height))


class TestConvBnRelu:
    def test_output_nonnegative_and_stats_sink(self, rng, f64):
        store = ParamStore(dtype=np.float64)
        block = ConvBnRelu(store, "b", 3, 5, rng)
        x = Tensor(rng.normal(size=(2, 6, 6, 3)))
        sink = []
        y = block(x, train=True, sink=sink)
        assert y.shape == (2, 6, 6, 5)
        assert (y.data >= 0).all()
        assert sink, "training pass must queue running-stat updates"
        rm_before = store["b.rm"].data.copy()
        drain_stats(store, sink)
        assert not np.array_equal(store["b.rm"].data, rm_before)

    def test_eval_uses_running_stats(self, rng, f64):
        store = ParamStore(dtype=np.float64)
        block = ConvBnRelu(store, "b", 3, 4, rng)
        x = Tensor(rng.normal(size=(1, 5, 5, 3)))
        sink = []
        y_train = block(x, train=True, sink=sink)
        drain_stats(store, sink)
        y_eval = block(x, train=False)
        assert not np.allclose(y_train.data, y_eval.data)


class TestBackbone:
    def test_three_scales_at_quarter_eighth_sixteenth(self, rng, f64):
        store = ParamStore(dtype=np.float64)
        bb = Backbone(store, "bb", 8, rng)
        levels = bb(Tensor(rng.normal(size=(2, 32, 48, 3))), train=True, sink=[])
        assert [tuple(l.shape) for l in levels] == [
            (2, 8, 12, 8),
            (2, 4, 6, 8),
            (2, 2, 3, 8),
        ]

    def test_camera_permutation_equivariance(self, rng, f64):
        # batch norm pools over all cameras jointly, so reordering cameras
        # must reorder outputs without changing them
        store = ParamStore(dtype=np.float64)
        bb = Backbone(store, "bb", 8, rng)
        imgs = rng.normal(size=(3, 32, 32, 3))
        perm = [2, 0, 1]
        out = bb(Tensor(imgs), train=True, sink=[])
        out_p = bb(Tensor(imgs[perm]), train=True, sink=[])
        for a, b in zip(out, out_p):
            np.testing.assert_allclose(a.data[perm], b.data, atol=1e-12)


class TestVfiModule:
    def test_switches_control_parameters(self, rng):
        full = ParamStore()
        VfiModule(full, "v", 2, 8, np.random.default_rng(0))
        names = set(full.names())
        assert any(".fpn" in n for n in names)
        assert any(".icim" in n for n in names)

        bare = ParamStore()
        VfiModule(bare, "v", 2, 8, np.random.default_rng(0), use_fpn=False, use_inter=False)
        bare_names = set(bare.names())
        assert not any(".fpn" in n for n in bare_names)
        assert not any(".icim" in n for n in bare_names)

    def test_conventional_drops_camera_embeddings(self, rng):
        store = ParamStore()
        VfiModule(store, "v", 2, 8, np.random.default_rng(0), conventional_inter=True)
        assert any(".icim" in n for n in store.names())
        assert not any(n.endswith(".cam") for n in store.names())

    def test_feature_levels_channel_matched(self, rng, f64):
        store = ParamStore(dtype=np.float64)
        vfi = VfiModule(store, "v", 2, 8, rng)
        feats = vfi(Tensor(rng.normal(size=(2, 32, 32, 3))), train=True, sink=[])
        assert [tuple(f.shape) for f in feats] == [
            (2, 8, 8, 8),
            (2, 4, 4, 8),
            (2, 2, 2, 8),
        ]


class TestVtEncoder:
    def test_query_pyramid_shapes(self, rng):
        store = ParamStore()
        names = init_query_pyramid(store, "e", 16, 16, 8, 3, rng)
        shapes = [store[n].shape for n in names]
        assert shapes == [(16, 16, 8), (8, 8, 8), (4, 4, 8)]

    def test_merge_upsamples_then_adds(self, rng, f64):
        coarse = Tensor(rng.normal(size=(4, 4, 8)))
        fine = Tensor(rng.normal(size=(8, 8, 8)))
        merged = merge_maps(coarse, fine)
        want = nd.upsample_bilinear(coarse, 2).data + fine.data
        np.testing.assert_allclose(merged.data, want, atol=1e-12)

    def test_refine_walks_coarse_to_fine(self, rng, f64):
        model = tiny_model()
        feats = model.vfi(
            Tensor(rng.normal(size=(4, 32, 48, 3))), train=False, sink=None
        )
        bev, updated = model.encoder.refine(feats, model.table)
        assert sorted(updated) == [1, 2, 3]
        assert updated[3].shape == (4, 4, 8)
        assert updated[2].shape == (8, 8, 8)
        assert updated[1].shape == (16, 16, 8)
        assert bev.shape == (16, 16, 8)
        shortcut = nd.upsample_bilinear(updated[3], 4).data
        np.testing.assert_allclose(bev.data, updated[1].data + shortcut, atol=1e-12)

    def test_single_level_has_no_shortcut(self, rng, f64):
        model = tiny_model(variant="m4")
        feats = model.vfi(
            Tensor(rng.normal(size=(4, 32, 48, 3))), train=False, sink=None
        )
        bev, updated = model.encoder.refine(feats, model.table)
        assert sorted(updated) == [1]
        np.testing.assert_array_equal(bev.data, updated[1].data)


class TestVariantTable:
    def test_switch_definitions(self):
        ours = variant_switches("ours")
        assert ours.use_fpn and ours.use_inter and ours.use_aux and ours.final_add
        m1 = variant_switches("m1")
        assert not m1.use_fpn and not m1.use_inter
        m2 = variant_switches("m2")
        assert m2.use_fpn and not m2.use_inter
        m3 = variant_switches("m3")
        assert m3.conventional_inter
        m4 = variant_switches("m4")
        assert m4.force_levels == 1 and not m4.use_aux and not m4.final_add
        m5 = variant_switches("m5")
        assert not m5.use_aux and m5.force_levels is None
        m6 = variant_switches("m6")
        assert m6.aux_all_levels and not m6.final_add
        with pytest.raises(ValueError):
            variant_switches("m7")

    def test_aux_branch_presence(self):
        assert sorted(tiny_model().aux_decoders) == [3]
        assert sorted(tiny_model(variant="m6").aux_decoders) == [2, 3]
        assert not tiny_model(variant="m4").aux_decoders
        assert not tiny_model(variant="m5").aux_decoders


class TestModel:
    def test_reference_parameter_count(self):
        model = Model(RunConfig(), desk_rig())
        assert model.store.num_elements() == 778482

    def test_forward_and_loss(self, rng, f64):
        model = tiny_model()
        images = rng.random((4, 32, 48, 3))
        target = (rng.random((16, 16)) < 0.3).astype(np.float64)
        main, aux = model.forward(images, train=False)
        assert main.shape == (16, 16)
        assert len(aux) == 1 and aux[0].shape == (16, 16)
        loss, main_val, aux_val, logits = model.sample_loss(
            images, target, train=True, sink=[]
        )
        assert np.isfinite(loss.item())
        assert main_val > 0 and aux_val > 0

    def test_same_seed_same_parameters(self):
        a, b = tiny_model(), tiny_model()
        for name in a.store.names():
            np.testing.assert_array_equal(a.store[name].data, b.store[name].data)

    def test_transfer_state_round_trip(self, rng):
        a, b = tiny_model(), tiny_model(seed=9)
        a.store.step_count = 5
        transfer_state(b.store, a.store)
        assert b.store.step_count == 5
        for name in a.store.names():
            np.testing.assert_array_equal(a.store[name].data, b.store[name].data)

    def test_transfer_state_rejects_mismatch(self):
        a = tiny_model()
        other = tiny_model(variant="m4")
        with pytest.raises(CheckpointError):
            transfer_state(other.store, a.store)

    def test_m5_variant_trains_without_aux_loss(self, rng, f64):
        model = tiny_model(variant="m5")
        images = rng.random((4, 32, 48, 3))
        target = (rng.random((16, 16)) < 0.3).astype(np.float64)
        _, main_val, aux_val, _ = model.sample_loss(images, target, train=True, sink=[])
        assert aux_val == 0.0 and main_val > 0
