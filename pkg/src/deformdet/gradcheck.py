"""Finite-difference verification of every hand-written backward pass.

Each check returns the worst relative error (entries within an absolute
1e-7 of the numeric value count as exact).  Inputs are drawn so that no
sampled coordinate sits on a bilinear cell boundary and no activation sits
on the leaky-ReLU kink, where central differences are meaningless.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import deform_conv as dc
from .config import BackboneConfig, ModelConfig, NeckConfig
from .head import BBox, Head, assign_targets, compute_loss
from .model import Detector
from .neck import Neck
from .nn import ParamStore
from .tensor import (
    ConvParams,
    bilinear_sample,
    bilinear_sample_grads,
    concat_channels,
    concat_channels_backward,
    conv2d,
    conv2d_backward,
    downsample_maxpool2x,
    downsample_maxpool2x_backward,
    finite_diff_grad,
    grad_error,
    upsample_nearest2x,
    upsample_nearest2x_backward,
)

EPS = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


@dataclass
class CheckResult:
    module: str
    group: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error <= REL_TOL


def _sample(rng, arr, k):
    if arr.size <= k:
        return np.arange(arr.size)
    return rng.choice(arr.size, k, replace=False)


def _compare(rng, f, arr, analytic, k=16) -> float:
    idx = _sample(rng, arr, k)
    numeric = finite_diff_grad(f, arr, EPS, idx)
    return grad_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx], ABS_FLOOR)


def _fractional_offsets(rng, layer: dc.DeformConvLayer, scale: float = 0.02):
    """Give the offset branch small weights and biases away from integers."""
    w = layer.offset_branch.weights
    w[...] = rng.normal(0, scale, w.shape)
    b = layer.offset_branch.bias
    b[...] = rng.integers(-1, 2, b.shape) + rng.uniform(0.35, 0.65, b.shape)


def check_tensor_core(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 1])
    out = []
    x = rng.normal(size=(2, 3, 6, 6))
    params = ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), 2, 1)
    up = rng.normal(size=conv2d(x, params).shape)
    g = conv2d_backward(x, params, up)

    def f(_):
        return float((conv2d(x, params) * up).sum())

    out.append(CheckResult("tensor-core", "conv2d.d_input", _compare(rng, f, x, g.d_input)))
    out.append(CheckResult("tensor-core", "conv2d.d_weights",
                           _compare(rng, f, params.weights, g.d_weights)))
    out.append(CheckResult("tensor-core", "conv2d.d_bias", _compare(rng, f, params.bias, g.d_bias)))

    fmap = rng.normal(size=(5, 6))
    errs = []
    for _ in range(8):
        coord = rng.integers([-1, -1], [5, 6]) + rng.uniform(0.05, 0.95, 2)
        u = rng.normal()
        d_map, dy, dx = bilinear_sample_grads(fmap, coord[0], coord[1], u)
        num_c = finite_diff_grad(lambda c: u * bilinear_sample(fmap, c[0], c[1]), coord, EPS)
        num_m = finite_diff_grad(lambda m: u * bilinear_sample(m, coord[0], coord[1]), fmap, EPS)
        errs.append(max(grad_error(np.array([dy, dx]), num_c, ABS_FLOOR),
                        grad_error(d_map, num_m, ABS_FLOOR)))
    out.append(CheckResult("tensor-core", "bilinear_sample", max(errs)))

    x = rng.normal(size=(1, 2, 3, 4))
    up = rng.normal(size=(1, 2, 6, 8))
    out.append(CheckResult("tensor-core", "upsample_nearest2x", _compare(
        rng, lambda _: float((upsample_nearest2x(x) * up).sum()), x,
        upsample_nearest2x_backward(up), 24)))

    x = rng.normal(size=(1, 2, 4, 6))
    up = rng.normal(size=(1, 2, 2, 3))
    out.append(CheckResult("tensor-core", "downsample_maxpool2x", _compare(
        rng, lambda _: float((downsample_maxpool2x(x) * up).sum()), x,
        downsample_maxpool2x_backward(x, up), 48)))

    a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3))
    up = rng.normal(size=(1, 5, 3, 3))
    ga, gb = concat_channels_backward([2, 3], up)
    err = max(_compare(rng, lambda _: float((concat_channels([a, b]) * up).sum()), a, ga),
              _compare(rng, lambda _: float((concat_channels([a, b]) * up).sum()), b, gb))
    out.append(CheckResult("tensor-core", "concat_channels", err))
    return out


def check_deform_conv(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 2])
    out = []
    for stride in (1, 2):
        layer = dc.make_dc_layer(2, 3, 3, stride, seed=seed)
        layer.main.bias[...] = rng.normal(size=3)
        _fractional_offsets(rng, layer)
        x = rng.normal(size=(2, 2, 7, 7))
        y, offsets = dc.dc_forward(x, layer)
        up = rng.normal(size=y.shape)
        g = dc.dc_backward(x, layer, offsets, up)

        def f(_):
            return float((dc.dc_forward(x, layer)[0] * up).sum())

        def f_off(o):
            return float((dc.deform_conv2d(x, layer.main, o) * up).sum())

        tag = f"s{stride}"
        for group, arr, an in (("d_input", x, g.d_input),
                               ("d_weights", layer.main.weights, g.d_weights),
                               ("d_bias", layer.main.bias, g.d_bias),
                               ("d_offset_weights", layer.offset_branch.weights, g.d_offset_weights),
                               ("d_offset_bias", layer.offset_branch.bias, g.d_offset_bias)):
            out.append(CheckResult("deform-conv", f"{tag}.{group}", _compare(rng, f, arr, an, 20)))
        out.append(CheckResult("deform-conv", f"{tag}.d_offsets",
                               _compare(rng, f_off, offsets, g.d_offsets, 20)))
    return out


def _toy_model_config(kind: str = "dfpn", dc_stages=frozenset({4, 5})) -> ModelConfig:
    return ModelConfig(
        BackboneConfig(stem_channels=3, stage_channels=(4, 4, 6, 6), dc_stages=dc_stages),
        NeckConfig(kind=kind, levels=(3, 4, 5), out_channels=4),
        num_classes=2)


def _randomise(store: ParamStore, rng) -> None:
    for name, p in store.params.items():
        if p.role == "offset":
            p.value[...] = rng.normal(0, 0.02, p.value.shape)
        elif p.role == "offset-bias":
            p.value[...] = rng.integers(-1, 2, p.value.shape) + rng.uniform(0.35, 0.65, p.value.shape)
        elif p.role.endswith("bias"):
            p.value[...] = rng.normal(0, 0.1, p.value.shape)


def check_dfpn(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 3])
    out = []
    for kind in ("dfpn", "pafpn"):
        cfg = NeckConfig(kind=kind, levels=(3, 4, 5), out_channels=3)
        store = ParamStore(seed)
        chans = {3: 2, 4: 3, 5: 4}
        neck = Neck(cfg, chans, store)
        _randomise(store, rng)
        C = {i: rng.normal(size=(1, chans[i], 2 ** (6 - i), 2 ** (6 - i))) for i in (3, 4, 5)}
        pyr = neck.forward(C)
        R = rng.normal(size=pyr.N[5].shape)
        store.zero_grad()
        dC = neck.backward({5: R})

        def f(_):
            return float((neck.forward(C).N[5] * R).sum())

        for i in (3, 4, 5):
            err = _compare(rng, f, C[i], dC[i], 12)
            if not np.any(dC[i]):
                err = float("inf")  # a dead branch is a failure too
            out.append(CheckResult("dfpn", f"{kind}.d_C{i}", err))
        grads = {n: store.grad(n).copy() for n in store}
        err = max(_compare(rng, f, store[n], grads[n], 6) for n in store)
        out.append(CheckResult("dfpn", f"{kind}.params", err))
    return out


def check_backbone(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 4])
    model = Detector(_toy_model_config(), seed)
    _randomise(model.store, rng)
    image = rng.uniform(size=(1, 3, 32, 32))
    feats = model.backbone.forward(image)
    R = rng.normal(size=feats[5].shape)
    model.store.zero_grad()
    d_img = model.backbone.backward({5: R})

    def f(_):
        return float((model.backbone.forward(image)[5] * R).sum())

    out = [CheckResult("backbone", "d_image", _compare(rng, f, image, d_img, 12))]
    grads = {n: model.store.grad(n).copy() for n in model.store if n.startswith("backbone")}
    err = max(_compare(rng, f, model.store[n], grads[n], 4) for n in grads)
    out.append(CheckResult("backbone", "params", err))
    return out


def check_head(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 5])
    out = []
    store = ParamStore(seed)
    head = Head(store, (3, 4), 3, 2)
    _randomise(store, rng)
    N = {3: rng.normal(size=(1, 3, 4, 4)), 4: rng.normal(size=(1, 3, 2, 2))}
    targets = assign_targets([[BBox(0.4, 0.55, 0.3, 0.25, 1)]], (3, 4), (32, 32), 2)

    def loss():
        return compute_loss(head.forward(N), targets, with_grad=True)

    total, _, _, d_cls, d_box = loss()
    store.zero_grad()
    dN = head.backward(d_cls, d_box)

    def f(_):
        return compute_loss(head.forward(N), targets)[0]

    for i in (3, 4):
        out.append(CheckResult("head", f"d_N{i}", _compare(rng, f, N[i], dN[i], 12)))
    grads = {n: store.grad(n).copy() for n in store}
    for branch in ("cls", "box"):
        names = [n for n in grads if f".{branch}." in n]
        err = max(_compare(rng, f, store[n], grads[n], 6) for n in names)
        out.append(CheckResult("head", f"{branch}.params", err))
    return out


def check_full_model(seed: int) -> list[CheckResult]:
    """Loss gradient through DC backbone, DFPN and head in one pass."""
    rng = np.random.default_rng([seed, 6])
    model = Detector(_toy_model_config(), seed)
    _randomise(model.store, rng)
    image = rng.uniform(size=(1, 3, 32, 32))
    targets = assign_targets([[BBox(0.5, 0.5, 0.4, 0.3, 0)]], (3, 4, 5), (32, 32), 2)
    pred = model.forward(image)
    _, _, _, d_cls, d_box = compute_loss(pred, targets, with_grad=True)
    model.store.zero_grad()
    model.backward(d_cls, d_box)

    def f(_):
        return compute_loss(model.forward(image), targets)[0]

    grads = {n: model.store.grad(n).copy() for n in model.store}
    out = []
    for part in ("backbone", "neck", "head"):
        names = [n for n in grads if n.startswith(part)]
        err = max(_compare(rng, f, model.store[n], grads[n], 3) for n in names)
        out.append(CheckResult("model", f"loss.{part}", err))
    return out


SUITE = (check_tensor_core, check_deform_conv, check_dfpn, check_backbone, check_head,
         check_full_model)


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    results = []
    for check in SUITE:
        results.extend(check(seed))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{r.module:12s} {r.group:28s} max_rel_err={r.error:.3e} {status}")
    return "\n".join(lines)
