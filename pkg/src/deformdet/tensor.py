"""Dense float64 tensor primitives with hand-written backward passes.

Feature maps are plain ``numpy.ndarray`` objects in (batch, channels, height,
width) layout.  Every operation checks shapes explicitly; nothing broadcasts.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
MAGIC = b"DTNS"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class ConvParams:
    weights: np.ndarray  # (outC, inC, kH, kW)
    bias: np.ndarray  # (outC,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be 4-D, got shape {self.weights.shape}")
        out_c, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
        if self.bias.shape != (out_c,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match outC={out_c}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class GradBundle:
    d_input: np.ndarray
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_offsets: np.ndarray | None = None
    d_offset_weights: np.ndarray | None = None
    d_offset_bias: np.ndarray | None = None


def as_tensor(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.size == 0 or any(d < 1 for d in arr.shape):
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
    return arr


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x: np.ndarray, params: ConvParams) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D (B,C,H,W), got {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel inC {params.in_channels}"
        )
    kh, kw = params.kernel
    ho = conv_output_size(x.shape[2], kh, params.stride, params.padding)
    wo = conv_output_size(x.shape[3], kw, params.stride, params.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"output size {ho}x{wo} < 1 for input {x.shape[2]}x{x.shape[3]}, "
            f"kernel {kh}x{kw}, stride {params.stride}, pad {params.padding}"
        )
    return ho, wo


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, params: ConvParams, ho: int, wo: int) -> np.ndarray:
    """Strided view (B, C, Ho, Wo, kH, kW) of the zero-padded input."""
    kh, kw = params.kernel
    s = params.stride
    win = sliding_window_view(_pad(x, params.padding), (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def im2col(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Patch matrix of shape (B*Ho*Wo, C*kH*kW), rows ordered (b, ho, wo)."""
    ho, wo = _check_conv(x, params)
    win = _windows(x, params, ho, wo)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0] * ho * wo, -1)


def conv2d(x: np.ndarray, params: ConvParams, cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation of ``x`` with ``params.weights`` plus per-channel bias."""
    ho, wo = _check_conv(x, params)
    if cols is None:
        cols = im2col(x, params)
    y = cols @ params.weights.reshape(params.out_channels, -1).T + params.bias
    return np.ascontiguousarray(y.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, params: ConvParams, upstream: np.ndarray,
                    cols: np.ndarray | None = None) -> GradBundle:
    ho, wo = _check_conv(x, params)
    expected = (x.shape[0], params.out_channels, ho, wo)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} != conv output shape {expected}")
    if cols is None:
        cols = im2col(x, params)
    kh, kw = params.kernel
    s, p = params.stride, params.padding
    b, c, h, w = x.shape

    dy = upstream.transpose(0, 2, 3, 1).reshape(-1, params.out_channels)
    wmat = params.weights.reshape(params.out_channels, -1)
    d_weights = (dy.T @ cols).reshape(params.weights.shape)
    d_bias = dy.sum(axis=0)

    dcols = (dy @ wmat).reshape(b, ho, wo, c, kh, kw)
    if kh == 1 and kw == 1 and s == 1 and p == 0:
        d_input = dcols[..., 0, 0].transpose(0, 3, 1, 2)
        return GradBundle(np.ascontiguousarray(d_input), d_weights, d_bias)
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (B, C, kH, kW, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += dcols[:, :, i, j]
    d_input = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return GradBundle(np.ascontiguousarray(d_input), d_weights, d_bias)


def bilinear_sample(fmap: np.ndarray, y: float, x: float) -> float:
    """Interpolate a single-channel ``H x W`` map at fractional ``(y, x)``.

    Corners outside the map read as zero.
    """
    h, w = fmap.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0
    total = 0.0
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * fmap[yy, xx]
    return total


def bilinear_sample_grads(fmap: np.ndarray, y: float, x: float, upstream: float = 1.0):
    """Backward of :func:`bilinear_sample`.

    Returns ``(d_map, d_y, d_x)`` where ``d_map`` is a dense array shaped like
    ``fmap``.  At integer coordinates the derivative is the forward difference.
    """
    h, w = fmap.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0

    def at(yy, xx):
        return fmap[yy, xx] if 0 <= yy < h and 0 <= xx < w else 0.0

    v00, v01 = at(y0, x0), at(y0, x0 + 1)
    v10, v11 = at(y0 + 1, x0), at(y0 + 1, x0 + 1)
    d_y = upstream * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
    d_x = upstream * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
    d_map = np.zeros_like(fmap, dtype=DTYPE)
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= yy < h and 0 <= xx < w:
                d_map[yy, xx] += upstream * wy * wx
    return d_map, d_y, d_x


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"expected (B,C,H,W), got {x.shape}")
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3))


def upsample_nearest2x_backward(upstream: np.ndarray) -> np.ndarray:
    b, c, h, w = upstream.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upstream spatial dims must be even, got {h}x{w}")
    return upstream.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def avgpool2x(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool needs even spatial dims, got {h}x{w}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _blocks(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"expected (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got H={h}, W={w}")
    # (B, C, H/2, W/2, 4) with the 2x2 block flattened row-major
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )


def downsample_maxpool2x(x: np.ndarray) -> np.ndarray:
    return _blocks(x).max(axis=-1)


def downsample_maxpool2x_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    blocks = _blocks(x)
    if upstream.shape != blocks.shape[:4]:
        raise ShapeError(f"upstream shape {upstream.shape} != pooled shape {blocks.shape[:4]}")
    # argmax returns the first maximum, i.e. row-major tie-breaking
    idx = blocks.argmax(axis=-1)
    grad = np.zeros_like(blocks)
    np.put_along_axis(grad, idx[..., None], upstream[..., None], axis=-1)
    b, c, h2, w2, _ = grad.shape
    return grad.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, 2 * h2, 2 * w2
    )


def downsample_times(x: np.ndarray, times: int) -> np.ndarray:
    for _ in range(times):
        x = downsample_maxpool2x(x)
    return x


def downsample_times_backward(x: np.ndarray, times: int, upstream: np.ndarray) -> np.ndarray:
    inputs = [x]
    for _ in range(times - 1):
        inputs.append(downsample_maxpool2x(inputs[-1]))
    grad = upstream
    for inp in reversed(inputs[:times]):
        grad = downsample_maxpool2x_backward(inp, grad)
    return grad


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def concat_channels(tensors: Sequence[np.ndarray]) -> np.ndarray:
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(
                f"concat needs equal batch/spatial dims: {ref} vs {t.shape}"
            )
    return np.concatenate(tensors, axis=1)


def concat_channels_backward(sizes: Sequence[int], upstream: np.ndarray) -> list[np.ndarray]:
    if sum(sizes) != upstream.shape[1]:
        raise ShapeError(f"channel sizes {list(sizes)} do not sum to {upstream.shape[1]}")
    cuts = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(upstream, cuts, axis=1)]


def leaky(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_backward(x: np.ndarray, upstream: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, upstream, slope * upstream)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], at: np.ndarray, eps: float = 1e-5, indices=None
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at``.

    ``at`` is perturbed in place and restored.  If ``indices`` (flat positions)
    is given only those entries are filled; the rest stay zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not at.flags.c_contiguous:
        raise ValueError("finite_diff_grad needs a C-contiguous array")
    grad = np.zeros(at.shape, dtype=DTYPE)
    flat = at.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(at)
        flat[i] = orig - eps
        fm = f(at)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def grad_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-7) -> float:
    """Worst relative error, counting entries within ``abs_floor`` as exact."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= abs_floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


# serialization: "DTNS", u32 rank, u32 dims..., f64 row-major, little-endian


def save_tensor(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype="<f8")
    header = MAGIC + struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(x).tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: expected {count} values, found {(len(raw) - offset) // 8}")
    data = np.frombuffer(raw, dtype="<f8", offset=offset, count=count)
    return data.reshape(dims).astype(DTYPE)
