"""Deformable convolution: every kernel tap samples the input at a learned,
per-position displacement from its regular grid location.

Offset channel layout: for tap ``n`` (taps enumerated row-major over the
kernel), channel ``2n`` holds the vertical shift and ``2n + 1`` the
horizontal shift.  A single offset field is shared by all input and output
channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DTYPE,
    ConvParams,
    GradBundle,
    ShapeError,
    conv2d,
    conv2d_backward,
    conv_output_size,
)

# Test-only mutation hook: flipping this to -1 corrupts d_offsets.
_OFFSET_GRAD_SIGN = 1.0


@dataclass
class DeformConvLayer:
    main: ConvParams
    offset_branch: ConvParams
    clamp: float | None = None

    def __post_init__(self):
        kh, kw = self.main.kernel
        if self.offset_branch.out_channels != 2 * kh * kw:
            raise ShapeError(
                f"offset branch must produce {2 * kh * kw} channels, "
                f"got {self.offset_branch.out_channels}"
            )
        if self.offset_branch.in_channels != self.main.in_channels:
            raise ShapeError("offset branch and main kernel disagree on input channels")
        if (self.offset_branch.kernel != self.main.kernel
                or self.offset_branch.stride != self.main.stride
                or self.offset_branch.padding != self.main.padding):
            raise ShapeError("offset branch must share kernel size, stride and padding")

    @property
    def default_clamp(self) -> float:
        return float(self.main.kernel[0] + 1)


def make_dc_layer(in_c: int, out_c: int, k: int, stride: int = 1, seed: int = 0,
                  clamp: float | None = None) -> DeformConvLayer:
    """He-uniform main kernel from ``seed``; offset branch starts at exactly zero."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {k}")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (in_c * k * k))
    main = ConvParams(rng.uniform(-bound, bound, (out_c, in_c, k, k)),
                      np.zeros(out_c, dtype=DTYPE), stride, k // 2)
    branch = ConvParams(np.zeros((2 * k * k, in_c, k, k), dtype=DTYPE),
                        np.zeros(2 * k * k, dtype=DTYPE), stride, k // 2)
    return DeformConvLayer(main, branch, clamp)


def _sample_grid(offsets: np.ndarray, params: ConvParams):
    """Absolute sampling coordinates (B, N, Ho, Wo) for each kernel tap."""
    b, c2, ho, wo = offsets.shape
    kh, kw = params.kernel
    s, p = params.stride, params.padding
    taps_y, taps_x = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    base_y = (np.arange(ho) * s - p)[None, :, None] + taps_y.reshape(-1)[:, None, None]
    base_x = (np.arange(wo) * s - p)[None, None, :] + taps_x.reshape(-1)[:, None, None]
    py = base_y[None] + offsets[:, 0::2]
    px = base_x[None] + offsets[:, 1::2]
    return py, px


class _Bilinear:
    """Vectorised zero-padded bilinear gather of all channels at shared coordinates."""

    def __init__(self, x: np.ndarray, py: np.ndarray, px: np.ndarray):
        b, c, h, w = x.shape
        self.shape = x.shape
        self.grid_shape = py.shape
        py = py.reshape(b, -1)
        px = px.reshape(b, -1)
        y0 = np.floor(py)
        x0 = np.floor(px)
        fy = py - y0
        fx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        flat = x.reshape(b, c, h * w)
        self.corners = []
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                idx = np.where(valid, yy * w + xx, 0)
                vals = np.take_along_axis(flat, idx[:, None, :], axis=2) * valid[:, None, :]
                self.corners.append((idx, valid, wy * wx, vals))
        self.fy, self.fx = fy, fx

    def values(self) -> np.ndarray:
        out = sum(weight[:, None, :] * vals for _, _, weight, vals in self.corners)
        b, c = self.shape[:2]
        return out.reshape(b, c, *self.grid_shape[1:])

    def backward(self, d_samples: np.ndarray):
        """Returns (d_x, d_py, d_px) for upstream shaped (B, C, N, Ho, Wo)."""
        b, c, h, w = self.shape
        d = d_samples.reshape(b, c, -1)
        (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = self.corners
        fy, fx = self.fy[:, None, :], self.fx[:, None, :]
        d_py = (d * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))).sum(axis=1)
        d_px = (d * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))).sum(axis=1)

        plane = (np.arange(b)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
        d_x = np.zeros(b * c * h * w, dtype=DTYPE)
        for idx, valid, weight, _ in self.corners:
            contrib = d * (weight * valid)[:, None, :]
            d_x += np.bincount((plane + idx[:, None, :]).ravel(), weights=contrib.ravel(),
                               minlength=d_x.size)
        return (d_x.reshape(b, c, h, w), d_py.reshape(self.grid_shape),
                d_px.reshape(self.grid_shape))


def _check_offsets(x: np.ndarray, params: ConvParams, offsets: np.ndarray):
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"input {x.shape} incompatible with kernel inC {params.in_channels}")
    kh, kw = params.kernel
    ho = conv_output_size(x.shape[2], kh, params.stride, params.padding)
    wo = conv_output_size(x.shape[3], kw, params.stride, params.padding)
    expected = (x.shape[0], 2 * kh * kw, ho, wo)
    if offsets.shape != expected:
        raise ShapeError(f"offset field shape {offsets.shape} != expected {expected}")


def deform_conv2d(x: np.ndarray, params: ConvParams, offsets: np.ndarray) -> np.ndarray:
    """Convolution sampling ``x`` at grid positions displaced by ``offsets``."""
    _check_offsets(x, params, offsets)
    py, px = _sample_grid(offsets, params)
    samples = _Bilinear(x, py, px).values()  # (B, C, N, Ho, Wo)
    o, c = params.out_channels, params.in_channels
    w = params.weights.reshape(o, c, -1)
    y = np.tensordot(samples, w, axes=([1, 2], [1, 2])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y + params.bias[None, :, None, None])


def deform_conv2d_backward(x: np.ndarray, params: ConvParams, offsets: np.ndarray,
                           upstream: np.ndarray) -> GradBundle:
    """Gradients w.r.t. input (sampling path only), weights, bias and offsets."""
    _check_offsets(x, params, offsets)
    b, _, ho, wo = offsets.shape
    if upstream.shape != (b, params.out_channels, ho, wo):
        raise ShapeError(f"upstream shape {upstream.shape} != output shape "
                         f"{(b, params.out_channels, ho, wo)}")
    py, px = _sample_grid(offsets, params)
    sampler = _Bilinear(x, py, px)
    samples = sampler.values()
    o, c = params.out_channels, params.in_channels
    w = params.weights.reshape(o, c, -1)

    d_w = np.tensordot(upstream, samples, axes=([0, 2, 3], [0, 3, 4]))
    d_samples = np.tensordot(upstream, w, axes=([1], [0])).transpose(0, 3, 4, 1, 2)
    d_x, d_py, d_px = sampler.backward(d_samples)
    d_off = np.empty_like(offsets)
    d_off[:, 0::2] = d_py
    d_off[:, 1::2] = d_px
    return GradBundle(d_x, d_w.reshape(params.weights.shape), upstream.sum(axis=(0, 2, 3)),
                      d_offsets=d_off)


def _apply_clamp(raw: np.ndarray, layer: DeformConvLayer):
    if layer.clamp is None:
        return raw
    return np.clip(raw, -layer.clamp, layer.clamp)


def dc_forward(x: np.ndarray, layer: DeformConvLayer, offsets: np.ndarray | None = None):
    """Returns ``(output, offsets)``.

    ``offsets`` are produced by the offset branch unless injected explicitly;
    the returned field is the raw branch output (pre-clamp).
    """
    if x.ndim != 4 or x.shape[1] != layer.main.in_channels:
        raise ShapeError(f"input {x.shape} incompatible with inC {layer.main.in_channels}")
    if offsets is None:
        offsets = conv2d(x, layer.offset_branch)
    y = deform_conv2d(x, layer.main, _apply_clamp(offsets, layer))
    return y, offsets


def dc_backward(x: np.ndarray, layer: DeformConvLayer, offsets: np.ndarray,
                upstream: np.ndarray, through_branch: bool = True) -> GradBundle:
    """Full backward.  With ``through_branch`` the offset gradient is pushed
    through the offset branch, adding its input gradient and filling the
    branch weight/bias gradients."""
    grads = deform_conv2d_backward(x, layer.main, _apply_clamp(offsets, layer), upstream)
    d_off = grads.d_offsets * _OFFSET_GRAD_SIGN
    if layer.clamp is not None:
        d_off = d_off * (np.abs(offsets) < layer.clamp)
    grads.d_offsets = d_off
    if through_branch:
        branch = conv2d_backward(x, layer.offset_branch, d_off)
        grads.d_input = grads.d_input + branch.d_input
        grads.d_offset_weights = branch.d_weights
        grads.d_offset_bias = branch.d_bias
    return grads
