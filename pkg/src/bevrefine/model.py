"""End-to-end model assembly and the ablation variant switchboard."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .config import RunConfig
from .geometry import BEVGridSpec, CameraModel, precompute_projection_table
from .heads import AuxDecoder, ClassHeader, LossWeights, MapDecoder, total_loss
from .nd import ParamStore, Tensor
from .vfi import VfiModule
from .vtencoder import VtEncoder


@dataclass(frozen=True)
class VariantSwitches:
    """Architectural toggles fully determined by an ablation tag."""

    use_fpn: bool = True
    use_inter: bool = True
    conventional_inter: bool = False
    force_levels: int | None = None
    use_aux: bool = True
    aux_all_levels: bool = False
    final_add: bool = True


_VARIANTS = {
    "ours": VariantSwitches(),
    # backbone only: the whole feature-interaction stage removed
    "m1": VariantSwitches(use_fpn=False, use_inter=False),
    # cross-level FPN kept, cross-camera attention removed
    "m2": VariantSwitches(use_inter=False),
    # cross-camera attention swapped for the conventional single-reference design
    "m3": VariantSwitches(conventional_inter=True),
    # single query map, no auxiliary branch, no final shortcut
    "m4": VariantSwitches(force_levels=1, use_aux=False, final_add=False),
    # full pyramid but trained without the auxiliary branch
    "m5": VariantSwitches(use_aux=False),
    # auxiliary supervision on every non-final level; no final shortcut
    "m6": VariantSwitches(aux_all_levels=True, final_add=False),
}


def variant_switches(tag: str) -> VariantSwitches:
    try:
        return _VARIANTS[tag]
    except KeyError:
        raise ValueError(f"unknown variant tag {tag!r}") from None


class Model:
    """The full pipeline: camera features -> refined BEV map -> class logits."""

    def __init__(self, cfg: RunConfig, cameras: list[CameraModel], *, dtype=None):
        cfg.validate()
        self.cfg = cfg
        self.cameras = list(cameras)
        self.switches = variant_switches(cfg.variant)
        self.n_levels = self.switches.force_levels or cfg.n_levels
        if dtype is None:
            dtype = np.float64 if cfg.precision == "f64" else np.float32
        self.store = ParamStore(dtype=dtype)
        self.grid = BEVGridSpec(
            x_cells=cfg.bev_cells,
            y_cells=cfg.bev_cells,
            length_m=cfg.bev_extent_m,
            width_m=cfg.bev_extent_m,
            channels=cfg.channels,
        )
        self.table = precompute_projection_table(self.grid, self.cameras, self.n_levels)

        rng = np.random.default_rng(cfg.seed)
        self.vfi = VfiModule(
            self.store,
            "vfi",
            len(self.cameras),
            cfg.channels,
            rng,
            use_fpn=self.switches.use_fpn,
            use_inter=self.switches.use_inter,
            conventional_inter=self.switches.conventional_inter,
        )
        self.encoder = VtEncoder(
            self.store,
            "enc",
            cfg.bev_cells,
            cfg.bev_cells,
            cfg.channels,
            len(self.cameras),
            rng,
            n_levels=self.n_levels,
            layers_per_level=cfg.layers_per_level,
            n_feat_levels=3,
            heads=cfg.heads,
            z_samples=cfg.z_samples,
            final_add=self.switches.final_add,
        )
        self.header = ClassHeader(self.store, "head", cfg.channels, rng)
        self.decoder = MapDecoder(self.store, "dec", cfg.channels, rng)
        self.aux_decoders: dict[int, AuxDecoder] = {}
        if self.switches.use_aux:
            if self.switches.aux_all_levels:
                levels = range(2, self.n_levels + 1)
            else:
                levels = [self.n_levels] if self.n_levels > 1 else []
            for s in levels:
                self.aux_decoders[s] = AuxDecoder(
                    self.store, f"aux{s}", cfg.channels, s - 1, rng
                )
        self.loss_weights = LossWeights(
            alpha=cfg.alpha, gamma=cfg.gamma, a_f=cfg.a_f, lambdas=(cfg.lambda_c,)
        )

    def forward(self, images, train: bool, sink: list | None = None) -> tuple[Tensor, list[Tensor]]:
        """images (N_c, H, W, 3) -> (main logits (X, Y), aux logits per level)."""
        imgs = Tensor(np.asarray(images, dtype=self.store.dtype))
        features = self.vfi(imgs, train, sink)
        bev, updated = self.encoder.refine(features, self.table)
        main = self.decoder(self.header(bev, train, sink), train, sink)
        aux = [
            self.aux_decoders[s](updated[s], train, sink)
            for s in sorted(self.aux_decoders)
        ]
        return main, aux

    def sample_loss(
        self, images, target, train: bool, sink: list | None = None
    ) -> tuple[Tensor, float, float, Tensor]:
        """Loss of one sample; returns (loss, main part, aux part, main logits)."""
        main, aux = self.forward(images, train, sink)
        loss, main_val, aux_val = total_loss([main], [aux], [target], self.loss_weights)
        return loss, main_val, aux_val, main


def transfer_state(dst: ParamStore, src: ParamStore) -> None:
    """Copy parameter values and optimizer moments between identically shaped
    stores (e.g. from a loaded checkpoint into a freshly built model)."""
    dst_names = set(dst.names())
    src_names = set(src.names())
    if dst_names != src_names:
        missing = sorted(dst_names - src_names)
        extra = sorted(src_names - dst_names)
        raise nd.checkpoint.CheckpointError(
            f"parameter sets differ: missing {missing[:5]}, unexpected {extra[:5]}"
        )
    for name in sorted(dst_names):
        t_dst, t_src = dst[name], src[name]
        if t_dst.shape != t_src.shape:
            raise nd.checkpoint.CheckpointError(
                f"shape mismatch for {name}: {t_dst.shape} vs {t_src.shape}"
            )
        t_dst.data[...] = t_src.data.astype(t_dst.dtype)
        m_dst, v_dst = dst.moments(name)
        m_src, v_src = src.moments(name)
        m_dst[...] = m_src.astype(m_dst.dtype)
        v_dst[...] = v_src.astype(v_dst.dtype)
    dst.step_count = src.step_count
