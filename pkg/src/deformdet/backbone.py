"""Small CSPDarkNet-style backbone producing the C2..C5 feature maps."""
from __future__ import annotations

import numpy as np

from .config import BackboneConfig
from .nn import Conv, DeformConv, ParamStore, offset_param_count
from .tensor import ShapeError


class Stage:
    """Stride-2 entry conv followed by residual 3x3 blocks."""

    def __init__(self, store: ParamStore, spec, in_c: int, clamp):
        tag = f"stage{spec.index}"
        prefix = f"backbone.{tag}"

        def make(name, cin, stride):
            if spec.use_dc:
                return DeformConv(store, name, cin, spec.channels, 3, stride, stage=tag,
                                  clamp=clamp)
            return Conv(store, name, cin, spec.channels, 3, stride, stage=tag)

        self.entry = make(f"{prefix}.entry", in_c, 2)
        self.blocks = [make(f"{prefix}.block{j}", spec.channels, 1) for j in range(spec.blocks)]

    def forward(self, x):
        x = self.entry.forward(x)
        for block in self.blocks:
            x = x + block.forward(x)
        return x

    def backward(self, dy):
        for block in reversed(self.blocks):
            dy = dy + block.backward(dy)
        return self.entry.backward(dy)


class Backbone:
    def __init__(self, config: BackboneConfig, store: ParamStore):
        self.config = config
        self.stem = Conv(store, "backbone.stem", 3, config.stem_channels, 3, 2, stage="stem")
        clamp = 4.0 if config.offset_clamp else None  # k + 1 for 3x3 kernels
        self.stages = {}
        in_c = config.stem_channels
        for spec in config.stages:
            self.stages[spec.index] = Stage(store, spec, in_c, clamp)
            in_c = spec.channels

    def channels(self, level: int) -> int:
        if level == 1:
            return self.config.stem_channels
        return self.config.stage_channels[level - 2]

    def forward(self, image: np.ndarray) -> dict[int, np.ndarray]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) image batch, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image size {h}x{w} must be divisible by 32")
        x = self.stem.forward(image)
        feats = {1: x} if self.config.export_c1 else {}
        for level, stage in self.stages.items():
            x = stage.forward(x)
            feats[level] = x
        return feats

    def backward(self, grads: dict[int, np.ndarray]) -> np.ndarray:
        """Backpropagate per-level gradients (missing levels count as zero)."""
        dy = None
        for level in sorted(self.stages, reverse=True):
            g = grads.get(level)
            if g is not None:
                dy = g if dy is None else dy + g
            if dy is not None:
                dy = self.stages[level].backward(dy)
        if 1 in grads:
            dy = grads[1] if dy is None else dy + grads[1]
        if dy is None:
            return None
        return self.stem.backward(dy)


def build_backbone(config: BackboneConfig, seed: int = 0,
                   store: ParamStore | None = None) -> Backbone:
    return Backbone(config, store if store is not None else ParamStore(seed))


def expected_param_count(config: BackboneConfig) -> int:
    """Closed-form parameter count of the backbone described by ``config``."""
    def conv(cin, cout):
        return cout * cin * 9 + cout

    total = conv(3, config.stem_channels)
    in_c = config.stem_channels
    for spec in config.stages:
        layers = [in_c] + [spec.channels] * spec.blocks
        for cin in layers:
            total += conv(cin, spec.channels)
            if spec.use_dc:
                total += offset_param_count(cin)
        in_c = spec.channels
    return total
