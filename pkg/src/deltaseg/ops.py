"""Differentiable operations on `Tensor`.

Every op returns a new tensor whose backward closure maps the output
gradient to one gradient per input (``None`` for non-differentiable inputs).
Convolutions follow NCHW layout with weights shaped (C_out, C_in/groups, K, K);
transposed convolutions use (C_in, C_out/groups, K, K).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .tensor import Tensor, as_tensor


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return Tensor._make(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,))


# -- reductions and shape ops --------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._make(np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def pad2d(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return Tensor._make(out, (x,), lambda g: (g[:, :, pad:-pad, pad:-pad],))


# -- activations ----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)
    return Tensor._make(np.clip(x.data, 0, 6), (x,), lambda g: (g * mask,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with a single slope shared across all channels."""
    pos = x.data > 0
    a = slope.data.reshape(())
    out = np.where(pos, x.data, a * x.data)

    def backward(g):
        gx = np.where(pos, g, a * g)
        ga = np.sum(np.where(pos, 0, g * x.data)).reshape(slope.shape)
        return gx, ga

    return Tensor._make(out.astype(x.dtype), (x, slope), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def activation(x: Tensor, kind: str, slope: Optional[Tensor] = None, axis: int = 1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "relu6":
        return relu6(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope tensor")
        return prelu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        if not -x.ndim <= axis < x.ndim:
            raise ValueError(f"softmax axis {axis} out of range for {x.ndim}-d input")
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


# -- convolution ----------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    transposed: bool = False

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel", "stride", "dilation", "groups"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}"
            )

    @property
    def effective_kernel(self) -> int:
        return (self.kernel - 1) * self.dilation + 1

    @property
    def weight_shape(self) -> tuple:
        k = self.kernel
        if self.transposed:
            return (self.in_channels, self.out_channels // self.groups, k, k)
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_size(self, n: int, output_padding: int = 0) -> int:
        if self.transposed:
            return (n - 1) * self.stride - 2 * self.padding + self.effective_kernel + output_padding
        return (n + 2 * self.padding - self.effective_kernel) // self.stride + 1


def _tap_slices(i: int, j: int, d: int, s: int, ho: int, wo: int) -> tuple:
    return (
        Ellipsis,
        slice(i * d, i * d + s * (ho - 1) + 1, s),
        slice(j * d, j * d + s * (wo - 1) + 1, s),
    )


def _weight_taps(w: np.ndarray, groups: int) -> np.ndarray:
    """(C_out, C_in/g, K, K) -> contiguous (K, K, g, C_out/g, C_in/g)."""
    cout, cin_g, k, _ = w.shape
    return np.ascontiguousarray(w.reshape(groups, cout // groups, cin_g, k, k).transpose(3, 4, 0, 1, 2))


def _conv_forward(x: np.ndarray, w: np.ndarray, s: int, p: int, d: int, groups: int) -> np.ndarray:
    n, c, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    ho = (h + 2 * p - d * (k - 1) - 1) // s + 1
    wo = (wd + 2 * p - d * (k - 1) - 1) // s + 1
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cout_g = cout // groups
    xg = xp.reshape(n, groups, cin_g, xp.shape[2], xp.shape[3])
    taps = _weight_taps(w, groups)
    if cin_g == 1 and cout_g == 1:
        out = np.zeros((n, groups, ho, wo), dtype=x.dtype)
        tmp = np.empty_like(out)
        for i in range(k):
            for j in range(k):
                xs = xg[_tap_slices(i, j, d, s, ho, wo)][:, :, 0]
                np.multiply(xs, taps[i, j].reshape(1, groups, 1, 1), out=tmp)
                out += tmp
        return out.reshape(n, cout, ho, wo)
    out = np.zeros((n, groups, cout_g, ho * wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            xs = xg[_tap_slices(i, j, d, s, ho, wo)]
            out += np.matmul(taps[i, j], xs.reshape(n, groups, cin_g, ho * wo))
    return out.reshape(n, cout, ho, wo)


def _conv_grad_input(gy: np.ndarray, w: np.ndarray, x_shape: tuple, s: int, p: int, d: int, groups: int) -> np.ndarray:
    n, c, h, wd = x_shape
    cout, cin_g, k, _ = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    cout_g = cout // groups
    gxp = np.zeros((n, groups, cin_g, h + 2 * p, wd + 2 * p), dtype=gy.dtype)
    depthwise = cin_g == 1 and cout_g == 1
    if depthwise:
        taps = _weight_taps(w, groups).reshape(k, k, 1, groups, 1, 1, 1)
        gyg = gy.reshape(n, groups, 1, ho, wo)
    else:
        taps = np.ascontiguousarray(np.swapaxes(_weight_taps(w, groups), -1, -2))
        gyg = gy.reshape(n, groups, cout_g, ho * wo)
    for i in range(k):
        for j in range(k):
            sl = _tap_slices(i, j, d, s, ho, wo)
            if depthwise:
                gxp[sl] += gyg * taps[i, j]
            else:
                gxp[sl] += np.matmul(taps[i, j], gyg).reshape(n, groups, cin_g, ho, wo)
    gxp = gxp.reshape(n, c, h + 2 * p, wd + 2 * p)
    if p:
        gxp = gxp[:, :, p:-p, p:-p]
    return np.ascontiguousarray(gxp)


def _conv_grad_weight(gy: np.ndarray, x: np.ndarray, w_shape: tuple, s: int, p: int, d: int, groups: int) -> np.ndarray:
    n = x.shape[0]
    cout, cin_g, k, _ = w_shape
    ho, wo = gy.shape[2], gy.shape[3]
    cout_g = cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    xg = xp.reshape(n, groups, cin_g, xp.shape[2], xp.shape[3])
    gyg = gy.reshape(n, groups, cout_g, ho * wo)
    gw = np.zeros((groups, cout_g, cin_g, k, k), dtype=gy.dtype)
    depthwise = cin_g == 1 and cout_g == 1
    for i in range(k):
        for j in range(k):
            xs = xg[_tap_slices(i, j, d, s, ho, wo)].reshape(n, groups, cin_g, ho * wo)
            if depthwise:
                gw[:, 0, 0, i, j] = np.einsum("ngl,ngl->g", gyg[:, :, 0], xs[:, :, 0])
            else:
                gw[..., i, j] = np.matmul(gyg, np.swapaxes(xs, -1, -2)).sum(axis=0)
    return gw.reshape(w_shape)


def _check_conv_shapes(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"{op}: input channel dimension is {x.shape[1]} but spec.in_channels={spec.in_channels}"
        )
    if weight.shape != spec.weight_shape:
        raise ValueError(f"{op}: weight shape {weight.shape} does not match expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"{op}: bias shape {bias.shape} does not match out_channels={spec.out_channels}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec, output_padding: int = 0) -> Tensor:
    """2-D (optionally grouped, dilated, strided or transposed) convolution."""
    if spec.transposed:
        return conv_transpose2d(x, weight, bias, spec, output_padding)
    _check_conv_shapes(x, weight, bias, spec, "conv2d")
    s, p, d, groups = spec.stride, spec.padding, spec.dilation, spec.groups
    for axis, n in (("height", x.shape[2]), ("width", x.shape[3])):
        if spec.effective_kernel > n + 2 * p:
            raise ValueError(
                f"conv2d: effective kernel extent {spec.effective_kernel} exceeds padded input {axis} {n + 2 * p}"
            )
    out = _conv_forward(x.data, weight.data, s, p, d, groups)
    if out.size == 0:
        raise ValueError(f"conv2d: zero-size output {out.shape}")
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    x_shape, w_shape = x.shape, weight.shape

    def backward(g):
        gx = _conv_grad_input(g, weight.data, x_shape, s, p, d, groups) if x.requires_grad else None
        gw = _conv_grad_weight(g, x.data, w_shape, s, p, d, groups) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec, output_padding: int = 0) -> Tensor:
    """Adjoint of `conv2d` with respect to its input."""
    _check_conv_shapes(x, weight, bias, spec, "conv_transpose2d")
    s, p, d, groups = spec.stride, spec.padding, spec.dilation, spec.groups
    n, _, h, w = x.shape
    ho, wo = spec.output_size(h, output_padding), spec.output_size(w, output_padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d: zero-size output ({ho}, {wo})")
    out_shape = (n, spec.out_channels, ho, wo)
    out = _conv_grad_input(x.data, weight.data, out_shape, s, p, d, groups)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    w_shape = weight.shape

    def backward(g):
        gx = _conv_forward(g, weight.data, s, p, d, groups)[:, :, :h, :w] if x.requires_grad else None
        gw = _conv_grad_weight(x.data, g, w_shape, s, p, d, groups) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


# -- pooling ----------------------------------------------------------------------


def _pool_geometry(x: Tensor, window: int, stride: int) -> tuple:
    h, w = x.shape[2], x.shape[3]
    if window > h or window > w:
        raise ValueError(f"pool window {window} exceeds input extent {h}x{w}")
    return (h - window) // stride + 1, (w - window) // stride + 1


def max_pool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; gradient goes to the first (row-major) maximum of each window."""
    stride = stride or window
    ho, wo = _pool_geometry(x, window, stride)
    taps = [x.data[_tap_slices(i, j, 1, stride, ho, wo)] for i in range(window) for j in range(window)]
    stacked = np.stack(taps)
    arg = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for t in range(window * window):
            i, j = divmod(t, window)
            gx[_tap_slices(i, j, 1, stride, ho, wo)] += g * (arg == t)
        return (gx,)

    return Tensor._make(out, (x,), backward)


def avg_pool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or window
    ho, wo = _pool_geometry(x, window, stride)
    scale = 1.0 / (window * window)
    out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            out += x.data[_tap_slices(i, j, 1, stride, ho, wo)]
    out *= scale

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                gx[_tap_slices(i, j, 1, stride, ho, wo)] += g * scale
        return (gx,)

    return Tensor._make(out, (x,), backward)


def global_avg_pool2d(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def pool2d(x: Tensor, kind: str, window: int = 2, stride: Optional[int] = None) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window, stride)
    if kind == "avg":
        return avg_pool2d(x, window, stride)
    if kind == "global_avg":
        return global_avg_pool2d(x)
    raise ValueError(f"unknown pool kind {kind!r}")


# -- normalization ------------------------------------------------------------------


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, torch convention).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d: gamma/beta length must equal channel count {c}")
    shape = (1, c, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m <= 1:
            raise ValueError("batch_norm2d: training needs more than one value per channel (batch 1, 1x1 spatial)")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std.reshape(shape)
            else:
                gx = dxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


# -- resampling ---------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the interpolation weights of output i (half-pixel centres)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with align_corners=False (half-pixel centre) sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2], x.shape[3]
    if (h, w) == (out_h, out_w):
        return Tensor._make(x.data.copy(), (x,), lambda g: (g,))
    mh = bilinear_matrix(h, out_h, x.dtype)
    mw = bilinear_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return Tensor._make(out, (x,), backward)


def unit_direction(v: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize rows of an (N, C, ...) tensor over axis 1 to unit L2 norm.

    ``eps`` is added to the norm in the denominator. A row whose norm is
    exactly zero has no direction; it is replaced by the first basis vector
    and receives zero gradient.
    """
    axes = tuple(range(1, v.ndim))
    norm = np.sqrt((v.data * v.data).sum(axis=axes, keepdims=True))
    denom = norm + eps
    out = v.data / denom
    dead = (norm == 0).reshape(-1)
    if dead.any():
        e1 = np.zeros(v.shape[1:], dtype=v.dtype)
        e1[(0,) * e1.ndim] = 1.0
        out[dead] = e1

    def backward(g):
        safe = np.where(norm == 0, 1.0, norm)
        dot = (v.data * g).sum(axis=axes, keepdims=True)
        gv = g / denom - v.data * dot / (safe * denom * denom)
        gv[dead] = 0.0
        return (gv,)

    return Tensor._make(out, (v,), backward)
