"""Convolutional layers and the parameter-free ops of the U-Net family.

All spatial ops use NCHW layout and cross-correlation (no kernel flip).
"same" padding follows the usual convention: total padding
``max((ceil(h/s) - 1)*s + k - h, 0)`` with the extra pixel on the bottom/right.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, concat, from_op

__all__ = [
    "Conv2d",
    "SeparableConv2d",
    "MaxPool2x2",
    "Upsample2x",
    "Add",
    "Concat",
    "conv2d",
    "depthwise_conv2d",
    "conv2d_forward",
    "separable_conv2d_forward",
    "maxpool2x2",
    "upsample_nearest2x",
    "softmax_channels",
    "log_softmax_channels",
    "he_uniform",
]


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _pads(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "valid":
        if size < k:
            raise ShapeError(f"spatial extent {size} is smaller than kernel {k} under 'valid' padding")
        return 0, 0, (size - k) // stride + 1
    if padding != "same":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2, out


def _check_input(x: Tensor, in_ch: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an [n, c, h, w] tensor, got shape {x.shape}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"{what}: input has {x.shape[1]} channels, layer expects {in_ch}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Dense 2-D cross-correlation. ``weight`` is [out_ch, in_ch, kh, kw]."""
    out_ch, in_ch, kh, kw = weight.shape
    _check_input(x, in_ch, "conv2d")
    n, _, h, w = x.shape
    pt, pb, ho = _pads(h, kh, stride, padding)
    pl, pr, wo = _pads(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else x.data
    # cols: [n, c, ho, wo, kh, kw] strided view
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wm = weight.data
    if kh == 1 and kw == 1 and stride == 1:
        out = np.tensordot(wm[:, :, 0, 0], x.data, axes=([1], [1]))
        out = out.transpose(1, 0, 2, 3)
    else:
        out = np.tensordot(cols, wm, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=np.result_type(x.data, wm))
    xp_shape = xp.shape

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if kh == 1 and kw == 1 and stride == 1:
                gxp = np.tensordot(wm[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            else:
                gcols = np.tensordot(g, wm, axes=([1], [0]))  # [n, ho, wo, c, kh, kw]
                gxp = np.zeros(xp_shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                            gcols[..., i, j].transpose(0, 3, 1, 2)
                        )
            gx = np.ascontiguousarray(gxp[:, :, pt:pt + h, pl:pl + w])
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return from_op("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel 2-D cross-correlation. ``weight`` is [c, 1, kh, kw]."""
    c, one, kh, kw = weight.shape
    if one != 1:
        raise ShapeError(f"depthwise weight must be [c, 1, kh, kw], got {weight.shape}")
    _check_input(x, c, "depthwise_conv2d")
    n, _, h, w = x.shape
    pt, pb, ho = _pads(h, kh, stride, padding)
    pl, pr, wo = _pads(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    wm = weight.data
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, wm))
    for i in range(kh):
        for j in range(kw):
            out += wm[None, :, 0, i, j, None, None] * xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]

    def bw(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.zeros_like(wm)
            for i in range(kh):
                for j in range(kw):
                    win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, win)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * wm[None, :, 0, i, j, None, None]
            gx = np.ascontiguousarray(gxp[:, :, pt:pt + h, pl:pl + w])
        return gx, gw

    return from_op("depthwise_conv2d", out, (x, weight), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2×2 max pooling, stride 2. Gradient goes to the first maximum in row-major window order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects [n, c, h, w], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return from_op("maxpool2x2", np.ascontiguousarray(out), (x,), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects [n, c, h, w], got {x.shape}")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return from_op("upsample_nearest2x", out, (x,), bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, stabilised by subtracting the per-pixel max."""
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs at least 2 channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return from_op("softmax_channels", s, (x,), bw)


def log_softmax_channels(x: Tensor) -> Tensor:
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"log_softmax_channels needs at least 2 channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return from_op("log_softmax_channels", out, (x,), bw)


# ---------------------------------------------------------------------------
# layer objects


class Conv2d:
    kind = "Conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1,
                 padding: str = "same", activation: Optional[str] = "relu",
                 rng: Optional[np.random.Generator] = None):
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        if stride < 1:
            raise ValueError("stride must be positive")
        _pads(kernel_size, kernel_size, stride, padding)  # validates padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel_size * kernel_size
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.activation = activation
        self.weight = Tensor._wrap(he_uniform(rng, (out_ch, in_ch, kernel_size, kernel_size), fan_in), True)
        self.bias = Tensor._wrap(np.zeros(out_ch, dtype=np.float32), True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d_forward(x, self)
        return y.relu() if self.activation == "relu" else y

    def output_shape(self, shape: tuple) -> tuple:
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"Conv2d: input has {c} channels, layer expects {self.in_ch}")
        k = self.kernel_size
        return (self.out_ch, _pads(h, k, self.stride, self.padding)[2], _pads(w, k, self.stride, self.padding)[2])


class SeparableConv2d:
    """Depthwise k×k per-channel conv followed by a biased pointwise 1×1 conv."""

    kind = "SeparableConv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1,
                 padding: str = "same", activation: Optional[str] = "relu",
                 rng: Optional[np.random.Generator] = None):
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        _pads(kernel_size, kernel_size, stride, padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.activation = activation
        k = kernel_size
        self.depthwise = Tensor._wrap(he_uniform(rng, (in_ch, 1, k, k), k * k), True)
        self.pointwise = Tensor._wrap(he_uniform(rng, (out_ch, in_ch, 1, 1), in_ch), True)
        self.bias = Tensor._wrap(np.zeros(out_ch, dtype=np.float32), True)

    def parameters(self) -> dict[str, Tensor]:
        return {"depthwise": self.depthwise, "pointwise": self.pointwise, "bias": self.bias}

    def num_params(self) -> int:
        return self.depthwise.size + self.pointwise.size + self.bias.size

    def __call__(self, x: Tensor) -> Tensor:
        y = separable_conv2d_forward(x, self)
        return y.relu() if self.activation == "relu" else y

    def output_shape(self, shape: tuple) -> tuple:
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"SeparableConv2d: input has {c} channels, layer expects {self.in_ch}")
        k = self.kernel_size
        return (self.out_ch, _pads(h, k, self.stride, self.padding)[2], _pads(w, k, self.stride, self.padding)[2])


def conv2d_forward(x: Tensor, layer: Conv2d) -> Tensor:
    return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)


def separable_conv2d_forward(x: Tensor, layer: SeparableConv2d) -> Tensor:
    y = depthwise_conv2d(x, layer.depthwise, layer.stride, layer.padding)
    return conv2d(y, layer.pointwise, layer.bias, 1, "valid")


class MaxPool2x2:
    kind = "MaxPool2x2"

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def num_params(self) -> int:
        return 0

    def __call__(self, x: Tensor) -> Tensor:
        return maxpool2x2(x)

    def output_shape(self, shape: tuple) -> tuple:
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"MaxPool2x2 needs even spatial extents, got {h}x{w}")
        return (c, h // 2, w // 2)


class Upsample2x:
    kind = "Upsample2x"

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def num_params(self) -> int:
        return 0

    def __call__(self, x: Tensor) -> Tensor:
        return upsample_nearest2x(x)

    def output_shape(self, shape: tuple) -> tuple:
        c, h, w = shape
        return (c, 2 * h, 2 * w)


class Add:
    kind = "Add"

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def num_params(self) -> int:
        return 0

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"Add: operand shapes differ, {a.shape} vs {b.shape}")
        return a + b

    def output_shape(self, a: tuple, b: tuple) -> tuple:
        if a != b:
            raise ShapeError(f"Add: operand shapes differ, {a} vs {b}")
        return a


class Concat:
    kind = "Concat"

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def num_params(self) -> int:
        return 0

    def __call__(self, *xs: Tensor) -> Tensor:
        return concat(xs, axis=1)

    def output_shape(self, *shapes: tuple) -> tuple:
        if len({s[1:] for s in shapes}) != 1:
            raise ShapeError(f"Concat: spatial extents differ: {shapes}")
        return (sum(s[0] for s in shapes),) + shapes[0][1:]
