"""2-D convolution kernels: standard, grouped, depthwise and pointwise.

All kernels use the cross-correlation convention (no kernel flip), symmetric
zero padding and the same stride on both axes.  Group ``g`` reads input
channels ``[g*cin/G, (g+1)*cin/G)`` and writes output channels
``[g*cout/G, (g+1)*cout/G)``.

``conv2d_reference`` is the brute-force oracle.  ``conv2d`` is the production
kernel and dispatches to one of three lowerings:

* depthwise (one input and one output channel per group): per channel, the k
  input rows behind each output row times a banded (Toeplitz) tap matrix;
* pointwise (1x1, one group, no padding): a per-pixel matrix product;
* everything else: patch-matrix lowering followed by a batched matmul.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .validation import check_tensor4

__all__ = [
    "ConvParams",
    "output_size",
    "conv2d_reference",
    "conv2d",
    "conv2d_backward",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "conv2d_with_cache",
    "conv2d_backward_from_cache",
]


@dataclass(frozen=True)
class ConvParams:
    """Weights ``(c_out, c_in / groups, kh, kw)`` plus convolution metadata."""

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weights
        if not isinstance(w, np.ndarray) or w.ndim != 4:
            raise ValueError(f"weights must be a 4-D array, got {getattr(w, 'shape', w)}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.groups < 1 or w.shape[0] % self.groups:
            raise ValueError(f"groups={self.groups} must divide c_out={w.shape[0]}")
        if w.shape[2] != w.shape[3]:
            raise ValueError(f"only square kernels are supported, got {w.shape[2:]}")
        if self.bias is not None and np.shape(self.bias) != (w.shape[0],):
            raise ValueError(f"bias must have length c_out={w.shape[0]}, got {np.shape(self.bias)}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


def output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_input(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D (n, c, h, w), got shape {x.shape}")
    if x.shape[1] != p.c_in:
        raise ValueError(
            f"input has {x.shape[1]} channels but weights {p.weights.shape} "
            f"with groups={p.groups} expect {p.c_in}"
        )
    k = p.kernel_size
    oh = output_size(x.shape[2], k, p.stride, p.padding)
    ow = output_size(x.shape[3], k, p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"non-positive output extent ({oh}, {ow}) for input {x.shape[2:]}, "
            f"kernel {k}, stride {p.stride}, padding {p.padding}"
        )
    return oh, ow


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _tap(xp: np.ndarray, i: int, j: int, stride: int, oh: int, ow: int) -> np.ndarray:
    return xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]


def conv2d_reference(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Direct-definition convolution, summing over (channel, kh, kw) in loop order.

    Only batch and output positions are vectorized; every weight is visited by
    an explicit Python loop.  Slow by design.
    """
    x = check_tensor4(x)
    oh, ow = _check_input(x, p)
    n = x.shape[0]
    k, s = p.kernel_size, p.stride
    cin_g = p.c_in // p.groups
    cout_g = p.c_out // p.groups
    xp = _pad(x, p.padding)
    out = np.zeros((n, p.c_out, oh, ow))
    for g in range(p.groups):
        for oc in range(g * cout_g, (g + 1) * cout_g):
            acc = np.zeros((n, oh, ow))
            for ci in range(cin_g):
                c = g * cin_g + ci
                for i in range(k):
                    for j in range(k):
                        acc = acc + p.weights[oc, ci, i, j] * _tap(xp, i, j, s, oh, ow)[:, c]
            out[:, oc] = acc
    if p.bias is not None:
        out = out + np.asarray(p.bias, dtype=np.float64)[None, :, None, None]
    return out


class _Cache(NamedTuple):
    mode: str
    x_shape: tuple
    saved: np.ndarray  # row bands, strided input or patch matrix depending on mode
    weights: np.ndarray
    has_bias: bool
    stride: int
    padding: int
    groups: int
    out_hw: tuple[int, int]


def _banded(w, wp, ow, stride):
    # (c, k * wp, ow) matrices with B[c, i * wp + stride * xo + j, xo] = w[c, 0, i, j]
    c, _, k, _ = w.shape
    band = np.zeros((c, k * wp, ow))
    xo = np.arange(ow)
    for i in range(k):
        for j in range(k):
            band[:, i * wp + stride * xo + j, xo] = w[:, 0, i, j][:, None]
    return band


def _depthwise_rows(xp, k, stride, oh):
    # (c, n * oh, k * wp): the k padded input rows feeding each output row
    n, c, _, wp = xp.shape
    rows = sliding_window_view(xp, k, axis=2)[:, :, : stride * (oh - 1) + 1 : stride]
    return np.ascontiguousarray(rows.transpose(1, 0, 2, 4, 3)).reshape(c, n * oh, k * wp)


def _depthwise_forward(xp, w, stride, oh, ow):
    n, c, _, wp = xp.shape
    rows = _depthwise_rows(xp, w.shape[2], stride, oh)
    out = np.matmul(rows, _banded(w, wp, ow, stride))
    return out.reshape(c, n, oh, ow).transpose(1, 0, 2, 3), rows


def _depthwise_backward(rows, xp_shape, w, grad_out, stride, pad, h, w_):
    n, c, hp, wp = xp_shape
    k = w.shape[2]
    oh, ow = grad_out.shape[2:]
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(c, n * oh, ow)
    d_band = np.matmul(rows.transpose(0, 2, 1), g)
    xo = np.arange(ow)
    grad_w = np.empty(w.shape)
    for i in range(k):
        for j in range(k):
            grad_w[:, 0, i, j] = d_band[:, i * wp + stride * xo + j, xo].sum(axis=1)
    d_rows = np.matmul(g, _banded(w, wp, ow, stride).transpose(0, 2, 1)).reshape(c, n, oh, k, wp)
    grad_xp = np.zeros((c, n, hp, wp))
    for i in range(k):
        grad_xp[:, :, i : i + stride * (oh - 1) + 1 : stride] += d_rows[:, :, :, i]
    return grad_xp[:, :, pad : pad + h, pad : pad + w_].transpose(1, 0, 2, 3), grad_w


def _patches(xp, k, stride, oh, ow, groups):
    # (g, cin_g * k * k, n * oh * ow): one GEMM operand per group
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    cols = win.reshape(n, groups, c // groups, oh, ow, k, k).transpose(1, 2, 5, 6, 0, 3, 4)
    return np.ascontiguousarray(cols).reshape(groups, (c // groups) * k * k, n * oh * ow)


def conv2d_with_cache(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, _Cache]:
    oh, ow = _check_input(x, p)
    w = p.weights
    n, c_in = x.shape[:2]
    c_out, cin_g, k, _ = w.shape
    s, pad, groups = p.stride, p.padding, p.groups

    if cin_g == 1 and c_out == groups:
        mode = "depthwise"
        out, saved = _depthwise_forward(_pad(x, pad), w, s, oh, ow)
    elif k == 1 and groups == 1 and pad == 0:
        mode = "pointwise"
        saved = x if s == 1 else np.ascontiguousarray(x[:, :, ::s, ::s][:, :, :oh, :ow])
        out = np.matmul(w.reshape(c_out, c_in), saved.reshape(n, c_in, oh * ow))
        out = out.reshape(n, c_out, oh, ow)
    else:
        mode = "patches"
        saved = _patches(_pad(x, pad), k, s, oh, ow, groups)
        wg = w.reshape(groups, c_out // groups, cin_g * k * k)
        out = np.matmul(wg, saved).reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3)

    if p.bias is not None:
        out = out + np.asarray(p.bias, dtype=np.float64)[None, :, None, None]
    cache = _Cache(mode, x.shape, saved, w, p.bias is not None, s, pad, groups, (oh, ow))
    return out, cache


def conv2d_backward_from_cache(cache: _Cache, grad_out: np.ndarray, input_grad: bool = True):
    """Gradients ``(grad_x, grad_w, grad_bias)`` for a forward pass recorded in ``cache``.

    With ``input_grad=False`` the input gradient is skipped and returned as ``None``.
    """
    n, c_in, h, w_ = cache.x_shape
    w = cache.weights
    c_out, cin_g, k, _ = w.shape
    oh, ow = cache.out_hw
    s, pad, groups = cache.stride, cache.padding, cache.groups
    if grad_out.shape != (n, c_out, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} != output shape {(n, c_out, oh, ow)}")

    if cache.mode == "depthwise":
        xp_shape = (n, c_in, h + 2 * pad, w_ + 2 * pad)
        grad_x, grad_w = _depthwise_backward(cache.saved, xp_shape, w, grad_out, s, pad, h, w_)
    elif cache.mode == "pointwise":
        xs = cache.saved
        go = grad_out.reshape(n, c_out, oh * ow)
        xs2 = xs.reshape(n, c_in, oh * ow)
        grad_w = (
            go.transpose(1, 0, 2).reshape(c_out, -1) @ xs2.transpose(1, 0, 2).reshape(c_in, -1).T
        ).reshape(w.shape)
        gxs = np.matmul(w.reshape(c_out, c_in).T, go).reshape(n, c_in, oh, ow)
        if s == 1:
            grad_x = gxs
        else:
            grad_x = np.zeros((n, c_in, h, w_))
            grad_x[:, :, ::s, ::s][:, :, :oh, :ow] = gxs
    else:
        cols = cache.saved
        go = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(groups, c_out // groups, -1)
        grad_w = np.matmul(go, cols.transpose(0, 2, 1)).reshape(w.shape)
        if input_grad:
            wg = w.reshape(groups, c_out // groups, cin_g * k * k)
            dcols = np.matmul(wg.transpose(0, 2, 1), go).reshape(c_in, k, k, n, oh, ow)
            grad_xp = np.zeros((c_in, n, h + 2 * pad, w_ + 2 * pad))
            for i in range(k):
                for j in range(k):
                    _tap(grad_xp, i, j, s, oh, ow)[...] += dcols[:, i, j]
            grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w_].transpose(1, 0, 2, 3)

    grad_b = grad_out.sum(axis=(0, 2, 3)) if cache.has_bias else None
    if not input_grad:
        return None, grad_w, grad_b
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Production convolution; agrees with ``conv2d_reference`` to within 1e-12."""
    return conv2d_with_cache(check_tensor4(x), p)[0]


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Exact gradients of ``conv2d(x, p)`` given the upstream gradient.

    Returns ``(grad_x, grad_w, grad_bias)``; ``grad_bias`` is ``None`` when
    ``p`` has no bias.
    """
    _, cache = conv2d_with_cache(check_tensor4(x), p)
    return conv2d_backward_from_cache(cache, np.asarray(grad_out, dtype=np.float64))


def depthwise_conv2d(x: np.ndarray, weights: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Per-channel spatial convolution; identical to ``conv2d`` with ``groups = c_in``."""
    x = check_tensor4(x)
    if weights.ndim != 4 or weights.shape[1] != 1 or weights.shape[0] != x.shape[1]:
        raise ValueError(
            f"depthwise weights must be (c, 1, kh, kw) with c={x.shape[1]}, got {weights.shape}"
        )
    return conv2d(x, ConvParams(weights, stride=stride, padding=padding, groups=x.shape[1]))


def pointwise_conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """1x1 convolution: a channel-mixing matrix applied independently at each pixel."""
    x = check_tensor4(x)
    if weights.ndim != 4 or weights.shape[2:] != (1, 1) or weights.shape[1] != x.shape[1]:
        raise ValueError(
            f"pointwise weights must be (c_out, {x.shape[1]}, 1, 1), got {weights.shape}"
        )
    return conv2d(x, ConvParams(weights, bias=bias))
