"""Detector assembly (backbone -> neck -> head) and checkpoint I/O.

A checkpoint is a directory with one ``.dtns`` tensor file per parameter,
``manifest.txt`` (``name shape role stage`` per line) and ``config.txt``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .backbone import Backbone
from .config import ModelConfig, TrainConfig, dump_config, load_config
from .head import Head, HeadOutput
from .neck import Neck
from .nn import ParamStore
from .tensor import load_tensor, save_tensor


class Detector:
    def __init__(self, config: ModelConfig, seed: int = 0, dense: bool = True):
        self.config = config
        self.store = ParamStore(seed)
        self.backbone = Backbone(config.backbone, self.store)
        levels = config.neck.levels
        self.neck = Neck(config.neck, {i: self.backbone.channels(i) for i in levels},
                         self.store, dense)
        self.head = Head(self.store, levels, config.neck.out_channels, config.num_classes)

    def forward(self, images: np.ndarray) -> HeadOutput:
        """``images`` in [0, 1]; centred before the backbone."""
        feats = self.backbone.forward(images - 0.5)
        self.pyramid = self.neck.forward(feats)
        return self.head.forward(self.pyramid.N)

    def backward(self, d_cls, d_box) -> np.ndarray:
        dN = self.head.backward(d_cls, d_box)
        dC = self.neck.backward(dN)
        return self.backbone.backward(dC)

    def param_manifest(self) -> list[str]:
        return self.store.manifest()

    def neck_manifest(self) -> list[str]:
        return self.neck.manifest()

    def param_count(self) -> int:
        return self.store.count()


def build_model(config: ModelConfig, seed: int = 0) -> Detector:
    return Detector(config, seed)


def save_checkpoint(path, model: Detector, cfg: TrainConfig, extra: dict | None = None) -> None:
    """Write parameters plus any ``extra`` named arrays (e.g. momentum buffers)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, p in model.store.params.items():
        save_tensor(root / f"{name}.dtns", p.value)
        lines.append(f"{name} {'x'.join(map(str, p.value.shape))} {p.role} {p.stage}")
    for name, arr in (extra or {}).items():
        save_tensor(root / f"{name}.dtns", arr)
        lines.append(f"{name} {'x'.join(map(str, np.shape(arr)))} state -")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    (root / "config.txt").write_text(dump_config(cfg))


def load_checkpoint(path) -> tuple[Detector, TrainConfig, dict]:
    root = Path(path)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"{root} is not a checkpoint directory (no manifest.txt)")
    cfg = load_config(root / "config.txt")
    model = Detector(cfg.model, cfg.seed)
    extra = {}
    for line in (root / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, shape, role, _ = line.split()
        arr = load_tensor(root / f"{name}.dtns")
        if role == "state":
            extra[name] = arr
            continue
        if name not in model.store:
            raise ValueError(f"checkpoint parameter {name} not in model built from config")
        target = model.store[name]
        if target.shape != arr.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {target.shape}")
        target[...] = arr
    return model, cfg, extra
