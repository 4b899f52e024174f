"""Differentiable layer primitives with hand-derived backward passes.

Convolution is cross-correlation (no kernel flip).  Transposed convolution is
implemented literally as the adjoint of that linear map: its forward pass is
the convolution's input-gradient and its input-gradient is the convolution's
forward pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ShapeError
from .tensor import check4


@dataclass
class ConvParams:
    """Weights ``(out_c, in_c, kh, kw)`` and per-output-channel bias."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({self.weights.shape[0]},)")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


@dataclass
class DeconvParams:
    """Weights ``(in_c, out_c, kh, kw)``; ``stride`` is the upsampling factor."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"deconv weights must be rank 4, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"deconv bias shape {self.bias.shape} != ({self.weights.shape[1]},)")
        kh, kw = self.weights.shape[2:]
        if kh < self.stride or kw < self.stride:
            raise ShapeError(f"kernel {kh}x{kw} does not cover stride {self.stride}")


@dataclass
class LayerGrads:
    d_input: np.ndarray
    d_weights: np.ndarray
    d_bias: np.ndarray


# Gradient-check support: while active, relu, maxpool and the loss clamp
# append their switching pattern (masks / argmaxes) so a caller can detect a
# finite difference step that crossed a kink.
_switch_log: list | None = None


def log_switch(pattern: np.ndarray) -> None:
    if _switch_log is not None:
        _switch_log.append(np.array(pattern, copy=True))


@contextlib.contextmanager
def record_switches():
    global _switch_log
    prev, _switch_log = _switch_log, []
    try:
        yield _switch_log
    finally:
        _switch_log = prev


def _conv_out_dims(h, w, kh, kw, stride, pad):
    num_h, num_w = h + 2 * pad - kh, w + 2 * pad - kw
    if num_h < 0 or num_w < 0:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    if num_h % stride or num_w % stride:
        raise ShapeError(f"non-integral output size for input {h}x{w}, kernel {kh}x{kw}, stride {stride}")
    return num_h // stride + 1, num_w // stride + 1


def _channel_major(t: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (c, n*h*w); free when n == 1."""
    n, c = t.shape[:2]
    if n == 1:
        return t.reshape(c, -1)
    return t.transpose(1, 0, 2, 3).reshape(c, -1)


def _batch_major(t2: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(c, n*h*w) -> (n, c, h, w)."""
    c = t2.shape[0]
    if n == 1:
        return t2.reshape(1, c, h, w)
    return np.ascontiguousarray(t2.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def conv_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    check4(x, "conv input")
    oc, ic, kh, kw = p.weights.shape
    n, c, h, w = x.shape
    if c != ic:
        raise ShapeError(f"conv expects {ic} input channels, got {c}")
    oh, ow = _conv_out_dims(h, w, kh, kw, p.stride, p.padding)
    cols = kernels.im2col(x, kh, kw, p.stride, p.padding)
    out = p.weights.reshape(oc, -1) @ cols
    out += p.bias[:, None]
    return _batch_major(out, n, oh, ow)


def conv_backward_input(d_out: np.ndarray, p: ConvParams, x_shape) -> np.ndarray:
    oc, ic, kh, kw = p.weights.shape
    d_cols = p.weights.reshape(oc, -1).T @ _channel_major(d_out)
    return kernels.col2im(d_cols, tuple(x_shape), kh, kw, p.stride, p.padding)


def conv_backward(x: np.ndarray, p: ConvParams, d_out: np.ndarray) -> LayerGrads:
    oc, ic, kh, kw = p.weights.shape
    n, _, h, w = x.shape
    expected = (n, oc) + _conv_out_dims(h, w, kh, kw, p.stride, p.padding)
    if d_out.shape != expected:
        raise ShapeError(f"conv d_out shape {d_out.shape} != {expected}")
    d2 = _channel_major(d_out)
    cols = kernels.im2col(x, kh, kw, p.stride, p.padding)
    d_w = (d2 @ cols.T).reshape(p.weights.shape)
    d_b = d2.sum(axis=1)
    d_x = kernels.col2im(p.weights.reshape(oc, -1).T @ d2, x.shape, kh, kw, p.stride, p.padding)
    return LayerGrads(d_x, d_w, d_b)


def deconv_out_dims(h: int, w: int, p: DeconvParams) -> tuple[int, int]:
    kh, kw = p.weights.shape[2:]
    return p.stride * (h - 1) + kh - 2 * p.padding, p.stride * (w - 1) + kw - 2 * p.padding


def deconv_forward(x: np.ndarray, p: DeconvParams) -> np.ndarray:
    check4(x, "deconv input")
    ic, oc, kh, kw = p.weights.shape
    n, c, h, w = x.shape
    if c != ic:
        raise ShapeError(f"deconv expects {ic} input channels, got {c}")
    oh, ow = deconv_out_dims(h, w, p)
    if oh < 1 or ow < 1:
        raise ShapeError(f"deconv output dims {oh}x{ow} not positive")
    cols = p.weights.reshape(ic, -1).T @ _channel_major(x)
    out = kernels.col2im(cols, (n, oc, oh, ow), kh, kw, p.stride, p.padding)
    out += p.bias[None, :, None, None]
    return out


def deconv_backward(x: np.ndarray, p: DeconvParams, d_out: np.ndarray) -> LayerGrads:
    ic, oc, kh, kw = p.weights.shape
    n, _, h, w = x.shape
    expected = (n, oc) + deconv_out_dims(h, w, p)
    if d_out.shape != expected:
        raise ShapeError(f"deconv d_out shape {d_out.shape} != {expected}")
    d_cols = kernels.im2col(d_out, kh, kw, p.stride, p.padding)
    d_x = _batch_major(p.weights.reshape(ic, -1) @ d_cols, n, h, w)
    d_w = (_channel_major(x) @ d_cols.T).reshape(p.weights.shape)
    d_b = d_out.sum(axis=(0, 2, 3))
    return LayerGrads(d_x, d_w, d_b)


def maxpool_forward(x: np.ndarray, window: int = 2, stride: int = 2):
    """2x2/stride-2 max pooling; returns ``(pooled, argmax_indices)``."""
    check4(x, "pool input")
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 windows with stride 2 are supported")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {x.shape[2:]}")
    out, idx = kernels.maxpool2_forward(x)
    if _switch_log is not None:
        _switch_log.append(idx.copy())
    return out, idx


def maxpool_backward(d_out: np.ndarray, idx: np.ndarray, x_shape) -> np.ndarray:
    if d_out.shape != idx.shape:
        raise ShapeError(f"pool d_out shape {d_out.shape} != {idx.shape}")
    return kernels.maxpool2_backward(d_out, idx, tuple(x_shape))


def relu(x: np.ndarray) -> np.ndarray:
    if _switch_log is not None:
        _switch_log.append(x > 0)
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is 0
    return d_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(y: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Backward through a sigmoid given its *output* ``y``."""
    return d_out * y * (1.0 - y)


def bilinear_kernel(k: int) -> np.ndarray:
    """``k x k`` bilinear-interpolation kernel for stride ``ceil(k/2)`` upsampling."""
    f = (k + 1) // 2
    center = f - 1 if k % 2 == 1 else f - 0.5
    og = np.arange(k, dtype=np.float64)
    filt = 1 - np.abs(og - center) / f
    return np.outer(filt, filt)
