"""Command-line interface.

Commands: ``gen`` (synthesize a dataset), ``train`` (fit one class),
``eval`` (IoU report), ``ablate`` (variant sweep over seeds), ``render``
(portable-pixmap visualizations), ``gradcheck`` (finite-difference suite).

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import statistics
import sys

import numpy as np

from . import nd, synthscene
from .config import (
    CLASS_NAMES,
    VARIANTS,
    ConfigError,
    RunConfig,
    config_to_text,
    merge_config,
    parse_config_text,
)
from .geometry import BEVGridSpec, GeometryError, desk_rig, load_rig
from .heads import binarize
from .model import Model, transfer_state
from .nd.checkpoint import CheckpointError
from .synthscene import DatasetError, SceneError
from .train import TrainAbort, class_pairs, evaluate_model, train_model

ABLATION_ORDER = ("m1", "m2", "m3", "m4", "m5", "m6", "ours")

# BEV class color coding shared with the scene renderer, plus map background.
_MAP_COLORS = {
    "vehicle": (235, 140, 40),  # orange
    "pedestrian": (50, 90, 220),  # blue
    "drivable": (128, 128, 128),  # grey
    "lane": (210, 40, 40),  # red
}
_MAP_BG = (245, 245, 245)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="key = value config file")
    shared.add_argument("--seed", type=int, metavar="N")
    shared.add_argument("--data", metavar="PATH", help="dataset file")
    shared.add_argument("--rig", metavar="PATH", help="camera rig file (default: desk rig)")
    shared.add_argument("--class", dest="class_name", choices=CLASS_NAMES)
    shared.add_argument("--out", metavar="PATH", help="output file or directory")
    shared.add_argument("--variant", choices=VARIANTS)

    parser = _Parser(prog="bevrefine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen", parents=[shared], help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True, metavar="N")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[shared], help="train one class")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="IoU report for a checkpoint")
    p.add_argument("checkpoint", metavar="CKPT")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[shared], help="variant sweep over 3 seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", parents=[shared], help="write PPM visualizations")
    p.add_argument("checkpoint", metavar="CKPT")
    p.add_argument("--index", type=int, default=0, metavar="I", help="sample index")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference suite")
    p.set_defaults(func=cmd_gradcheck)

    return parser


# ---------------------------------------------------------------------------
# config and artifact plumbing


def _effective_config(args, base_text: str | None = None) -> RunConfig:
    """Layered config: checkpoint-embedded text, then file, then flags."""
    values: dict = {}
    if base_text:
        values.update(parse_config_text(base_text))
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    overrides = {
        key: getattr(args, key, None)
        for key in ("seed", "data", "rig", "class_name", "variant")
    }
    return merge_config(values, overrides)


def _rig_for(cfg: RunConfig):
    if cfg.rig:
        return load_rig(cfg.rig)
    return desk_rig(cfg.image_width, cfg.image_height)


def _grid_for(cfg: RunConfig) -> BEVGridSpec:
    return BEVGridSpec(
        x_cells=cfg.bev_cells,
        y_cells=cfg.bev_cells,
        length_m=cfg.bev_extent_m,
        width_m=cfg.bev_extent_m,
        channels=cfg.channels,
    )


def _dataset_path(args, cfg: RunConfig) -> str:
    path = cfg.data
    if not path:
        raise ConfigError("no dataset given; pass --data or set data in the config")
    return path


def _require_out(args) -> str:
    if not args.out:
        raise ConfigError("no output path given; pass --out")
    return args.out


def _load_checkpoint_model(path: str, args):
    """Rebuild the model a checkpoint was trained with, flags overriding."""
    store, extra = nd.checkpoint.load(path)
    base_text = extra.decode("utf-8") if extra else None
    _guard_class(args, base_text, path)
    cfg = _effective_config(args, base_text=base_text)
    model = Model(cfg, _rig_for(cfg))
    transfer_state(model.store, store)
    return model, cfg


def _guard_class(args, base_text: str | None, path: str) -> None:
    """A checkpoint is fitted to one class; refuse a conflicting request."""
    requested = getattr(args, "class_name", None)
    if not (requested and base_text):
        return
    trained = parse_config_text(base_text).get("class_name", "vehicle")
    if requested != trained:
        raise ConfigError(
            f"{path} was trained for class {trained!r}, not {requested!r}"
        )


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary portable pixmap (P6); rgb is (H, W, 3) uint8."""
    arr = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def map_to_rgb(cells: np.ndarray, class_name: str) -> np.ndarray:
    """Binary BEV map -> top-down image: forward (+x) up, left (+y) left."""
    color = np.array(_MAP_COLORS[class_name], dtype=np.uint8)
    bg = np.array(_MAP_BG, dtype=np.uint8)
    mask = np.flip(np.asarray(cells, dtype=bool), (0, 1))
    return np.where(mask[:, :, None], color[None, None], bg[None, None])


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _effective_config(args)
    out = _require_out(args)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    samples = synthscene.generate_dataset(
        args.count, cfg.seed, _rig_for(cfg), _grid_for(cfg)
    )
    synthscene.save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _run_training(model: Model, cfg: RunConfig, pairs, *, log=print) -> list[dict]:
    return train_model(
        model,
        pairs,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        betas=(cfg.beta1, cfg.beta2),
        seed=cfg.seed,
        log=log,
    )


def cmd_train(args) -> int:
    resume_text = None
    resume_store = None
    if args.resume:
        resume_store, extra = nd.checkpoint.load(args.resume)
        resume_text = extra.decode("utf-8") if extra else None
    cfg = _effective_config(args, base_text=resume_text)
    out = _require_out(args)
    samples = synthscene.load_dataset(_dataset_path(args, cfg))
    pairs = class_pairs(samples, cfg.class_name)
    model = Model(cfg, _rig_for(cfg))
    if resume_store is not None:
        transfer_state(model.store, resume_store)
    print("epoch\tL_main\tL_aux\ttrain_iou")
    _run_training(model, cfg, pairs)
    nd.checkpoint.save(model.store, out, extra=config_to_text(cfg).encode("utf-8"))
    print(f"wrote checkpoint to {out} (step {model.store.step_count})")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint, args)
    samples = synthscene.load_dataset(_dataset_path(args, cfg))
    pairs = class_pairs(samples, cfg.class_name)
    scores = evaluate_model(model, pairs)
    print("sample\tiou")
    for i, s in enumerate(scores):
        print(f"{i}\t{s:.4f}")
    if scores:
        print(f"mean\t{sum(scores) / len(scores):.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _effective_config(args)
    path = _dataset_path(args, cfg)
    with open(path, "rb") as f:
        blob = f.read()
    print(f"dataset {path} sha256 {hashlib.sha256(blob).hexdigest()} ({len(blob)} bytes)")
    samples = synthscene.load_dataset(path)
    pairs = class_pairs(samples, cfg.class_name)
    rig = _rig_for(cfg)
    seeds = [cfg.seed + k for k in range(3)]
    print(
        f"class {cfg.class_name}, {len(pairs)} samples, {cfg.epochs} epochs, "
        f"seeds {' '.join(str(s) for s in seeds)}"
    )

    scores: dict[str, list[float]] = {}
    for tag in ABLATION_ORDER:
        scores[tag] = []
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, variant=tag, seed=seed)
            model = Model(run_cfg, rig)
            _run_training(model, run_cfg, pairs, log=None)
            per_sample = evaluate_model(model, pairs)
            iou = sum(per_sample) / len(per_sample) if per_sample else 0.0
            scores[tag].append(iou)
            print(f"run {tag} seed {seed}: iou {iou:.4f}")

    header = "variant\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmedian"
    print(header)
    for tag in ABLATION_ORDER:
        cells = "\t".join(f"{v:.4f}" for v in scores[tag])
        print(f"{tag}\t{cells}\t{statistics.median(scores[tag]):.4f}")
    ours, m4 = statistics.median(scores["ours"]), statistics.median(scores["m4"])
    verdict = "yes" if ours >= m4 else "no"
    print(f"median ours {ours:.4f} >= median m4 {m4:.4f}: {verdict} (soft criterion)")
    return 0


def cmd_render(args) -> int:
    import os

    model, cfg = _load_checkpoint_model(args.checkpoint, args)
    samples = synthscene.load_dataset(_dataset_path(args, cfg))
    if not 0 <= args.index < len(samples):
        raise DatasetError(
            f"sample index {args.index} out of range for {len(samples)} samples"
        )
    out_dir = _require_out(args)
    os.makedirs(out_dir, exist_ok=True)
    sample = samples[args.index]
    if cfg.class_name not in sample.maps:
        raise DatasetError(f"sample has no {cfg.class_name!r} map")

    def emit(name, rgb):
        path = os.path.join(out_dir, name)
        write_ppm(path, rgb)
        print(f"wrote {path}")

    emit(f"gt_{cfg.class_name}.ppm", map_to_rgb(sample.maps[cfg.class_name], cfg.class_name))
    main, aux = model.forward(sample.images, train=False)
    emit(f"pred_{cfg.class_name}.ppm", map_to_rgb(binarize(main.data), cfg.class_name))
    if aux:
        emit(f"aux_{cfg.class_name}.ppm", map_to_rgb(binarize(aux[-1].data), cfg.class_name))
    else:
        print("no auxiliary branch in this variant; skipping aux map")
    for ci, img in enumerate(sample.images):
        emit(f"cam{ci}.ppm", np.clip(img * 255.0, 0.0, 255.0).astype(np.uint8))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    lines, ok = run_suite(seed=args.seed if args.seed is not None else 0)
    for line in lines:
        print(line)
    return 0 if ok else 3


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except TrainAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 2
    except (SceneError, DatasetError, GeometryError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
