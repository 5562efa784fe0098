"""Run configuration: flat ``section.key = value`` text files.

Lines are UTF-8, ``#`` starts a comment, unknown keys are rejected.  Lists
are comma separated; PSP bins are written ``6x6,3x3,2x2,1x1``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    stem_channels: int = 32
    stage_blocks: tuple[int, ...] = (2, 2, 2, 2)
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    cardinality: int = 8
    stage_strides: tuple[int, ...] = (1, 2, 1, 1)
    stage_dilations: tuple[int, ...] = (1, 1, 2, 4)
    agg_channels: int = 256
    lstm_kernel: int = 3
    lstm_dilation: int = 2
    taps: tuple[str, ...] = ("s0", "s1", "s2", "s3", "s4")
    bins: tuple[tuple[int, int], ...] = ((6, 6), (3, 3), (2, 2), (1, 1))
    psp_reduce: int = 64
    fusion: str = "concat"
    norm: str = "group"
    gn_group_channels: int = 8
    num_classes: int = 5


@dataclass
class DataConfig:
    train_dir: str = ""
    val_dir: str = ""
    image_size: int = 64
    train_count: int = 8
    val_count: int = 0
    ignore_index: int = 255


@dataclass
class TrainConfig:
    lr: float = 1e-5
    steps: int = 300
    batch: int = 2
    seed: int = 0
    weight_decay: float = 0.01
    poly_power: float = 0.9
    loss: str = "ce"  # ce | lovasz | ce+lovasz
    lovasz_after: int = 0
    lovasz_weight: float = 1.0
    augment: bool = False
    flip_prob: float = 0.5
    scale_prob: float = 0.5
    contrast_prob: float = 0.5
    contrast_mode: str = "jitter"  # jitter | standardize
    val_every: int = 50
    checkpoint_by: str = "ce"  # ce | miou | accuracy
    precision: str = "float64"


@dataclass
class InferConfig:
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)


@dataclass
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    images: int = 64
    val_images: int = 16
    image_size: int = 64
    epochs: int = 24
    agg_channels: int = 64
    batch: int = 4
    lr: float = 2e-3
    aux_weight: float = 0.4
    threshold_fraction: float = 0.8
    variants: tuple[str, ...] = ()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


SECTIONS = ("model", "data", "train", "infer", "ablate")


def _field_types(section_obj) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(type(section_obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(section_obj)}


def _parse_value(text: str, tp, key: str):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        origin = typing.get_origin(tp)
        if origin is tuple:
            args = typing.get_args(tp)
            items = [s.strip() for s in text.split(",") if s.strip()]
            inner = args[0]
            if typing.get_origin(inner) is tuple:  # bins
                out = []
                for item in items:
                    a, b = item.lower().split("x")
                    out.append((int(a), int(b)))
                return tuple(out)
            return tuple(_parse_value(i, inner, key) for i in items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    raise ConfigError(f"unsupported type for {key}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}x{b}" for a, b in value)
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_option(cfg: RunConfig, key: str, text: str) -> None:
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    obj = getattr(cfg, section)
    types = _field_types(obj)
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, name, _parse_value(text, types[name], key))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        set_option(cfg, key.strip(), value)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved config in canonical order, one key per line."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
