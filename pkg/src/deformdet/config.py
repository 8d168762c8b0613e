"""Declarative model/training configuration and the flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    index: int
    channels: int
    blocks: int = 1
    use_dc: bool = False


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1)
    dc_stages: frozenset[int] = frozenset({4, 5})
    export_c1: bool = False
    offset_clamp: bool = False

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_blocks) != 4:
            raise ConfigError("backbone needs exactly four stages (2..5)")
        if any(c < 1 for c in self.stage_channels) or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("each stage needs at least one block")
        if list(self.stage_channels) != sorted(self.stage_channels):
            raise ConfigError("stage channels must be non-decreasing")
        bad = set(self.dc_stages) - {2, 3, 4, 5}
        if bad:
            raise ConfigError(f"invalid DC stage indices {sorted(bad)}; allowed 2..5")

    @property
    def stages(self) -> list[StageSpec]:
        return [StageSpec(i, c, b, i in self.dc_stages)
                for i, c, b in zip(range(2, 6), self.stage_channels, self.stage_blocks)]


@dataclass(frozen=True)
class NeckConfig:
    kind: str = "dfpn"
    levels: tuple[int, ...] = (3, 4, 5)
    out_channels: int = 64
    literal_topdown: bool = False

    def __post_init__(self):
        if self.kind not in ("dfpn", "pafpn"):
            raise ConfigError(f"neck kind must be dfpn or pafpn, got {self.kind!r}")
        lv = list(self.levels)
        if len(lv) < 2 or lv != list(range(lv[0], lv[0] + len(lv))) or lv[0] < 2 or lv[-1] > 5:
            raise ConfigError(f"neck levels must be a contiguous subset of 2..5 with >= 2 "
                              f"entries, got {lv}")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    neck: NeckConfig = field(default_factory=NeckConfig)
    num_classes: int = 6


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 100
    batch_size: int = 20
    seed: int = 0
    data: str = ""
    out: str = "run"
    eval_every: int = 0
    eval_split: str = "val"
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    cls_weight: float = 1.0
    box_weight: float = 5.0
    offset_lr_mult: float = 0.1
    grad_clip: float = 10.0
    threads: int = 1

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


# flat key -> (section, attribute, parser)

def _ints(v: str) -> tuple[int, ...]:
    v = v.strip()
    if v.lower() in ("", "none", "-"):
        return ()
    return tuple(int(t) for t in v.replace(" ", "").split(",") if t)


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


_KEYS = {
    "stem_channels": ("backbone", int),
    "stage_channels": ("backbone", _ints),
    "stage_blocks": ("backbone", _ints),
    "dc_stages": ("backbone", lambda v: frozenset(_ints(v))),
    "export_c1": ("backbone", _bool),
    "offset_clamp": ("backbone", _bool),
    "neck": ("neck", str),
    "neck_levels": ("neck", _ints),
    "out_channels": ("neck", int),
    "literal_topdown": ("neck", _bool),
    "num_classes": ("model", int),
    "lr": ("train", float),
    "momentum": ("train", float),
    "steps": ("train", int),
    "batch_size": ("train", int),
    "seed": ("train", int),
    "data": ("train", str),
    "out": ("train", str),
    "eval_every": ("train", int),
    "eval_split": ("train", str),
    "score_thresh": ("train", float),
    "nms_iou": ("train", float),
    "cls_weight": ("train", float),
    "box_weight": ("train", float),
    "offset_lr_mult": ("train", float),
    "grad_clip": ("train", float),
    "threads": ("train", int),
}
_RENAME = {"neck": "kind", "neck_levels": "levels"}


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def config_from_dict(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    sections = {"backbone": {}, "neck": {}, "model": {}, "train": {}}
    for key, raw in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, parse = _KEYS[key]
        try:
            sections[section][_RENAME.get(key, key)] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    try:
        backbone = dataclasses.replace(base.model.backbone, **sections["backbone"])
        neck = dataclasses.replace(base.model.neck, **sections["neck"])
        model = dataclasses.replace(base.model, backbone=backbone, neck=neck, **sections["model"])
        return dataclasses.replace(base, model=model, **sections["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return config_from_dict(parse_kv(Path(path).read_text()), base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list, frozenset, set)):
        items = sorted(v) if isinstance(v, (frozenset, set)) else v
        return ",".join(map(str, items)) or "none"
    return str(v)


def config_to_dict(cfg: TrainConfig) -> dict[str, str]:
    out = {}
    for key, (section, _) in _KEYS.items():
        obj = {"backbone": cfg.model.backbone, "neck": cfg.model.neck,
               "model": cfg.model, "train": cfg}[section]
        out[key] = _fmt(getattr(obj, _RENAME.get(key, key)))
    return out


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_to_dict(cfg).items())
