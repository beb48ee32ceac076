"""Differentiable layer operators on NCHW tensors."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor, make_result


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigurationError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    dilation_rate: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        for field in ("kernel", "stride", "dilation_rate", "padding"):
            object.__setattr__(self, field, _pair(getattr(self, field)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation_rate) < 1:
            raise ConfigurationError("kernel, stride and dilation rate must be positive")
        if min(self.padding) < 0:
            raise ConfigurationError("padding must be non-negative")

    @classmethod
    def same(cls, in_channels, out_channels, kernel=3, rate=1, stride=1):
        """Spec whose padding rate*(k-1)/2 keeps extents unchanged at stride 1 (odd k)."""
        k = _pair(kernel)
        r = _pair(rate)
        if k[0] % 2 == 0 or k[1] % 2 == 0:
            raise ConfigurationError("same padding needs an odd kernel")
        pad = (r[0] * (k[0] - 1) // 2, r[1] * (k[1] - 1) // 2)
        return cls(in_channels, out_channels, k, stride, r, pad)

    def effective_kernel(self):
        return tuple(r * (k - 1) + 1 for k, r in zip(self.kernel, self.dilation_rate))

    def output_extent(self, height, width):
        out = []
        for axis, n, p, e, s in zip(("height", "width"), (height, width), self.padding,
                                    self.effective_kernel(), self.stride):
            m = (n + 2 * p - e) // s + 1
            if n + 2 * p - e < 0 or m < 1:
                raise ConfigurationError(
                    f"conv2d output {axis} would be < 1: input {n}, padding {p}, "
                    f"effective kernel {e}, stride {s}"
                )
            out.append(m)
        return tuple(out)


def _check_conv(x, w, spec):
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d weights must be 4-D (F,C,kh,kw), got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d input has {x.shape[1]} channels but weights expect {w.shape[1]}")
    if (w.shape[0], w.shape[1]) != (spec.out_channels, spec.in_channels) or w.shape[2:] != spec.kernel:
        raise DimensionError(
            f"weights shape {w.shape} inconsistent with spec "
            f"({spec.out_channels},{spec.in_channels},{spec.kernel[0]},{spec.kernel[1]})"
        )


def _taps(spec, ho, wo):
    (kh, kw), (sh, sw), (rh, rw) = spec.kernel, spec.stride, spec.dilation_rate
    for i in range(kh):
        for j in range(kw):
            rows = slice(i * rh, i * rh + sh * (ho - 1) + 1, sh)
            cols = slice(j * rw, j * rw + sw * (wo - 1) + 1, sw)
            yield i, j, rows, cols


def _pad(x, spec):
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _unpad(gx, spec):
    ph, pw = spec.padding
    h, w = gx.shape[2], gx.shape[3]
    return gx[:, :, ph:h - ph, pw:w - pw]


def _conv_taps_forward(xp, w, spec, ho, wo):
    n = xp.shape[0]
    out = np.zeros((w.shape[0], n, ho, wo), dtype=xp.dtype)
    for i, j, rows, cols in _taps(spec, ho, wo):
        out += np.tensordot(w[:, :, i, j], xp[:, :, rows, cols], axes=([1], [1]))
    return out.transpose(1, 0, 2, 3)


def _im2col(xp, spec, ho, wo):
    n, c = xp.shape[:2]
    kh, kw = spec.kernel
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i, j, rows, cs in _taps(spec, ho, wo):
        cols[:, i, j] = xt[:, :, rows, cs]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, w, b, spec, method="im2col"):
    """Dilated 2-D cross-correlation.

    ``method="taps"`` accumulates one tensordot per kernel tap straight from
    the padded input and is the reference path; ``"im2col"`` gathers the
    dilated patches into a column matrix and does a single GEMM.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x, w, spec)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (spec.out_channels,):
            raise DimensionError(f"bias shape {b.shape} != ({spec.out_channels},)")
    n, c, h, wd = x.shape
    ho, wo = spec.output_extent(h, wd)
    xp = _pad(x.data, spec)
    f = spec.out_channels
    kh, kw = spec.kernel

    if method == "taps":
        out = _conv_taps_forward(xp, w.data, spec, ho, wo)
        cols = None
    elif method == "im2col":
        cols = _im2col(xp, spec, ho, wo)
        out = (w.data.reshape(f, -1) @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    else:
        raise ConfigurationError(f"unknown conv2d method {method!r}")
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    xshape, wdata = xp.shape, w.data

    def grad_fn(g):
        gt = g.transpose(1, 0, 2, 3)  # F,N,Ho,Wo
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if cols is not None:
            g2 = gt.reshape(f, -1)
            if w.requires_grad:
                gw = (g2 @ cols.T).reshape(wdata.shape)
            if x.requires_grad:
                gcols = (wdata.reshape(f, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros((c, n) + xshape[2:], dtype=g.dtype)
                for i, j, rows, cs in _taps(spec, ho, wo):
                    gxp[:, :, rows, cs] += gcols[:, i, j]
                gx = _unpad(gxp.transpose(1, 0, 2, 3), spec)
        else:
            if w.requires_grad:
                gw = np.zeros_like(wdata)
                for i, j, rows, cs in _taps(spec, ho, wo):
                    gw[:, :, i, j] = np.tensordot(gt, xp[:, :, rows, cs], axes=([1, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gxp = np.zeros(xshape, dtype=g.dtype)
                for i, j, rows, cs in _taps(spec, ho, wo):
                    gxp[:, :, rows, cs] += np.tensordot(gt, wdata[:, :, i, j], axes=([0], [0])).transpose(0, 3, 1, 2)
                gx = _unpad(gxp, spec)
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_result(out, (x, w) if b is None else (x, w, b), grad_fn, "conv2d")


def pointwise_conv(x, w, b, stride=1):
    """1x1 convolution: a per-pixel linear map over channels."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ConfigurationError(f"pointwise_conv needs 1x1 kernels, got weights shape {w.shape}")
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"pointwise_conv input shape {x.shape} incompatible with weights {w.shape}")
    s = _pair(stride)
    xd = x.data[:, :, ::s[0], ::s[1]] if s != (1, 1) else x.data
    n, c, h, wd = xd.shape
    f = w.shape[0]
    w2 = w.data.reshape(f, c)
    flat = xd.transpose(1, 0, 2, 3).reshape(c, -1)
    out = (w2 @ flat).reshape(f, n, h, wd).transpose(1, 0, 2, 3)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (f,):
            raise DimensionError(f"bias shape {b.shape} != ({f},)")
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    full_shape = x.shape

    def grad_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = (g2 @ flat.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gsub = (w2.T @ g2).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            if s == (1, 1):
                gx = gsub
            else:
                gx = np.zeros(full_shape, dtype=g.dtype)
                gx[:, :, ::s[0], ::s[1]] = gsub
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    return make_result(out, (x, w) if b is None else (x, w, b), grad_fn, "pointwise_conv")


def linear(x, w, b):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} and weights {w.shape} do not agree")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data

    def grad_fn(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return make_result(xd @ wd + b.data, (x, w, b), grad_fn, "linear")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), grad_fn, "relu")


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels, dtype=np.float32, momentum=0.1):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


BN_EPS = 1e-5


def batch_norm(x, gamma, beta, state, mode="train", eps=BN_EPS):
    """Per-channel normalization over (N, H, W).

    Train mode normalizes with the biased batch variance and folds the batch
    moments into ``state`` (unbiased variance for the running estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm affine parameters must have shape ({c},)")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if mode == "train":
        if m < 2:
            raise DimensionError(
                f"batch_norm in train mode needs N*H*W >= 2 for batch statistics, got {m} (input {x.shape})"
            )
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * (m / (m - 1))).astype(
            state.running_var.dtype)
    elif mode == "eval":
        mean, var = state.running_mean.astype(xd.dtype), state.running_var.astype(xd.dtype)
    else:
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    gd = gamma.data
    train = mode == "train"

    def grad_fn(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            scale = (gd * inv_std)[None, :, None, None]
            if train:
                gx = scale * (g - gbeta[None, :, None, None] / m - xhat * ggamma[None, :, None, None] / m)
            else:
                gx = g * scale
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), grad_fn, "batch_norm")


def dropout(x, p, mode="train", rng=None):
    """Inverted dropout; ``p`` is the drop probability."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if mode == "eval" or p == 0.0:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "dropout")
    if rng is None:
        raise ConfigurationError("train-mode dropout needs an rng stream")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def grad_fn(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), grad_fn, "dropout")


def softmax(x):
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax expects (N, K) logits with K >= 1, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p, (x,), grad_fn, "softmax")


def downsample_avg(x, factor):
    """Mean over non-overlapping factor x factor windows."""
    x = as_tensor(x)
    f = int(factor)
    if f < 1:
        raise ConfigurationError(f"downsample factor must be positive, got {factor}")
    n, c, h, w = x.shape
    if h % f or w % f:
        raise DimensionError(
            f"downsample_avg: extents {h}x{w} not divisible by {f}; "
            f"pad to {-(-h // f) * f}x{-(-w // f) * f} first"
        )
    if f == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "downsample_avg")
    out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def grad_fn(g):
        gx = np.repeat(np.repeat(g, f, axis=2), f, axis=3) / x.dtype.type(f * f)
        return (gx,)

    return make_result(out, (x,), grad_fn, "downsample_avg")


def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / x.dtype.type(h * w), x.shape),)

    return make_result(out, (x,), grad_fn, "global_avg_pool")


__all__ = [
    "BatchNormState", "Conv2dSpec", "Tensor", "batch_norm", "conv2d", "downsample_avg",
    "dropout", "global_avg_pool", "linear", "pointwise_conv", "relu", "softmax",
]
