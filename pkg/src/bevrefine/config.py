"""Run configuration: reference hyperparameters, ablation tags, text round-trip.

Config files are line-oriented ``key = value`` UTF-8 text with ``#`` comments;
command-line flags override file values.  The effective config is embedded in
every checkpoint so a run can be reproduced from the artifact alone.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

VARIANTS = ("ours", "m1", "m2", "m3", "m4", "m5", "m6")
CLASS_NAMES = ("vehicle", "pedestrian", "drivable", "lane")
PRECISIONS = ("f32", "f64")

# file/flag key for the class field ("class" is reserved in Python)
_ALIASES = {"class": "class_name"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    n_levels: int = 3
    channels: int = 32
    heads: int = 8
    z_samples: int = 4
    layers_per_level: int = 2
    delta: float = 0.25
    gamma: float = 2.0
    a_f: float = 0.25
    alpha: float = 1.0
    lambda_c: float = 1.0
    bev_cells: int = 64
    bev_extent_m: float = 40.0
    image_height: int = 96
    image_width: int = 160
    # data
    data: str = ""
    rig: str = ""
    class_name: str = "vehicle"
    # optimizer
    lr: float = 2e-4
    weight_decay: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 28
    batch_size: int = 4
    # run
    seed: int = 0
    variant: str = "ours"
    precision: str = "f32"

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.class_name not in CLASS_NAMES:
            raise ConfigError(
                f"unknown class {self.class_name!r}; expected one of {CLASS_NAMES}"
            )
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.heads != 8:
            raise ConfigError("the head-partitioned reference pattern requires 8 heads")
        if self.n_levels < 1:
            raise ConfigError("n_levels must be >= 1")
        if self.bev_cells % (2 ** (self.n_levels - 1)):
            raise ConfigError(
                f"bev_cells {self.bev_cells} not divisible by 2^{self.n_levels - 1}"
            )
        if self.channels % 4:
            raise ConfigError("channels must be divisible by 4")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.delta <= 0 or self.lr <= 0:
            raise ConfigError("delta and lr must be positive")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw: str):
    field = _FIELDS[name]
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into typed values; '#' starts a comment."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from e
    return values


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for name in _FIELDS:
        key = "class" if name == "class_name" else name
        value = getattr(cfg, name)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    return RunConfig(**parse_config_text(text)).validate()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_text(f.read())


def merge_config(base: dict, overrides: dict) -> RunConfig:
    """File values plus flag overrides (overrides win); returns a validated config."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _convert(key, str(value))
    return RunConfig(**merged).validate()
