"""Parameter registry and the stateful conv layers the detector is built from.

Layers cache their forward inputs and write gradients into the shared
:class:`ParamStore` on ``backward``.  Parameter values are drawn from a
generator keyed on ``(seed, name)``, so a parameter's initial value depends
only on its name and the model seed, not on what else the model contains.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import deform_conv as dc
from .tensor import DTYPE, ConvParams, conv2d, conv2d_backward, im2col, leaky, leaky_backward


@dataclass
class Param:
    value: np.ndarray
    role: str
    stage: str
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)


class ParamStore:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params: dict[str, Param] = {}

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def add(self, name: str, value: np.ndarray, role: str, stage: str = "-") -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Param(np.ascontiguousarray(value, dtype=DTYPE), role, stage)
        return self.params[name].value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return ((k, p.value) for k, p in self.params.items())

    def grad(self, name: str) -> np.ndarray:
        return self.params[name].grad

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self.params[name].grad += g

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def manifest(self) -> list[str]:
        """One line per parameter: ``name shape role stage``."""
        return [f"{name} {'x'.join(map(str, p.value.shape))} {p.role} {p.stage}"
                for name, p in self.params.items()]


def he_uniform(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Conv:
    """Plain convolution, optionally followed by leaky activation."""

    def __init__(self, store: ParamStore, name: str, in_c: int, out_c: int, k: int,
                 stride: int = 1, act: bool = True, stage: str = "-", role: str = "conv",
                 gain: float = 1.0, bias_init: float = 0.0):
        self.store, self.name = store, name
        self.stride, self.pad, self.act = stride, k // 2, act
        store.add(f"{name}.weight", he_uniform(store.rng(f"{name}.weight"),
                                               (out_c, in_c, k, k), gain), role, stage)
        store.add(f"{name}.bias", np.full(out_c, bias_init), f"{role}-bias", stage)

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.store[f"{self.name}.weight"], self.store[f"{self.name}.bias"],
                          self.stride, self.pad)

    def _pre(self, x):
        self.cols = im2col(x, self.params)
        return conv2d(x, self.params, self.cols)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        z = self._pre(x)
        if self.act:
            self.z = z
            return leaky(z)
        return z

    def _back(self, dz):
        g = conv2d_backward(self.x, self.params, dz, self.cols)
        self.store.accumulate(f"{self.name}.weight", g.d_weights)
        self.store.accumulate(f"{self.name}.bias", g.d_bias)
        return g.d_input

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dz = leaky_backward(self.z, dy) if self.act else dy
        return self._back(dz)


class DeformConv(Conv):
    """Drop-in replacement for :class:`Conv` with a zero-initialised offset branch."""

    def __init__(self, store: ParamStore, name: str, in_c: int, out_c: int, k: int,
                 stride: int = 1, act: bool = True, stage: str = "-", clamp: float | None = None):
        super().__init__(store, name, in_c, out_c, k, stride, act, stage)
        n = 2 * k * k
        store.add(f"{name}.offset.weight", np.zeros((n, in_c, k, k)), "offset", stage)
        store.add(f"{name}.offset.bias", np.zeros(n), "offset-bias", stage)
        self.clamp = clamp

    @property
    def layer(self) -> dc.DeformConvLayer:
        branch = ConvParams(self.store[f"{self.name}.offset.weight"],
                            self.store[f"{self.name}.offset.bias"], self.stride, self.pad)
        return dc.DeformConvLayer(self.params, branch, self.clamp)

    def _pre(self, x):
        y, self.offsets = dc.dc_forward(x, self.layer)
        return y

    def _back(self, dz):
        g = dc.dc_backward(self.x, self.layer, self.offsets, dz)
        self.store.accumulate(f"{self.name}.weight", g.d_weights)
        self.store.accumulate(f"{self.name}.bias", g.d_bias)
        self.store.accumulate(f"{self.name}.offset.weight", g.d_offset_weights)
        self.store.accumulate(f"{self.name}.offset.bias", g.d_offset_bias)
        return g.d_input


def offset_param_count(in_c: int, k: int = 3) -> int:
    """Extra parameters a deformable layer adds over a plain one."""
    return 2 * k * k * in_c * k * k + 2 * k * k
