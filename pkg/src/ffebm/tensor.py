"""Dense numeric kernels: matmul, 3x3 convolution and its adjoints, max
pooling, batch normalization.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout.  Every kernel
preserves the floating dtype of its inputs (float32 by default, float64 for
gradient-checking toys); per-channel statistics are accumulated in float64.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CorruptionError, DimensionError, StatisticsError, UsageError

DEFAULT_DTYPE = np.float32


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _out_size(size, k, stride, pad):
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise DimensionError(f"kernel {k} does not fit input {size} with pad {pad}")
    return out


def _im2col(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (B, H', W', C, kh, kw) view of the padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x, w, stride=1, pad=1):
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ w.reshape(O, -1).T
    return np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))


def conv2d_input_adjoint(g, w, stride, pad, input_shape):
    """Adjoint of :func:`conv2d` with respect to its input (transposed conv)."""
    B, C, H, W = input_shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"input shape {input_shape} does not match kernel {w.shape}")
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    if g.shape != (B, O, Ho, Wo):
        raise DimensionError(f"upstream {g.shape} != forward output {(B, O, Ho, Wo)}")
    gcols = g.transpose(0, 2, 3, 1).reshape(-1, O) @ w.reshape(O, -1)
    gcols = gcols.reshape(B, Ho, Wo, C, kh, kw)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.result_type(g, w))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])


def conv2d_weight_adjoint(g, x, stride, pad, kernel_size=None):
    """Adjoint of :func:`conv2d` with respect to the kernel.

    The kernel size is inferred from the input/output spatial sizes unless
    given explicitly.
    """
    if g.ndim != 4 or x.ndim != 4 or g.shape[0] != x.shape[0]:
        raise DimensionError(f"conv2d_weight_adjoint: bad shapes {g.shape}, {x.shape}")
    B, C, H, W = x.shape
    _, O, Ho, Wo = g.shape
    if kernel_size is None:
        kh = H + 2 * pad - (Ho - 1) * stride
        kw = W + 2 * pad - (Wo - 1) * stride
    else:
        kh = kw = kernel_size
    if kh < 1 or kw < 1 or _out_size(H, kh, stride, pad) != Ho or _out_size(W, kw, stride, pad) != Wo:
        raise DimensionError(f"upstream {g.shape} inconsistent with input {x.shape}")
    cols = _im2col(x, kh, kw, stride, pad).reshape(B * Ho * Wo, C * kh * kw)
    gw = g.transpose(0, 2, 3, 1).reshape(-1, O).T @ cols
    return gw.reshape(O, C, kh, kw)


@dataclass(frozen=True)
class PoolIndices:
    """Flat indices (into the pre-pool tensor) of each selected maximum."""

    indices: np.ndarray
    input_shape: tuple


def maxpool2d(x, window=2, stride=2):
    """Non-overlapping max pooling; ties go to the lowest flat index."""
    if window != stride:
        raise DimensionError("only non-overlapping pooling (window == stride) is supported")
    B, C, H, W = x.shape
    if H % window or W % window:
        raise DimensionError(f"spatial dims {(H, W)} not divisible by {window}")
    Hp, Wp = H // window, W // window
    blocks = x.reshape(B, C, Hp, window, Wp, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, Hp, Wp, window * window)
    # argmax picks the first maximum; window offsets are row-major, so this is
    # also the lowest flat index in the source tensor.
    arg = blocks.argmax(axis=-1)
    values = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, window)
    rows = np.arange(Hp)[:, None] * window + di
    cols = np.arange(Wp)[None, :] * window + dj
    plane = (np.arange(B)[:, None, None, None] * C + np.arange(C)[None, :, None, None]) * (H * W)
    flat = plane + rows * W + cols
    return values, PoolIndices(flat.astype(np.int64), (B, C, H, W))


def maxpool2d_gather(x, idx):
    """Values of ``x`` at recorded pooling positions (derivative of maxpool)."""
    if x.shape != idx.input_shape:
        raise DimensionError(f"tensor {x.shape} does not match pooled source {idx.input_shape}")
    return x.reshape(-1)[idx.indices]


def maxpool2d_adjoint(g, idx, input_shape=None):
    input_shape = tuple(input_shape or idx.input_shape)
    if g.shape != idx.indices.shape:
        raise DimensionError(f"upstream {g.shape} != pooled shape {idx.indices.shape}")
    size = int(np.prod(input_shape))
    flat = idx.indices.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= size):
        raise CorruptionError("pool index outside the source tensor")
    out = np.zeros(size, dtype=g.dtype)
    out[flat] = g.reshape(-1)
    return out.reshape(input_shape)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels, dtype=DEFAULT_DTYPE):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray  # per channel
    mode: str
    axes: tuple


def _bn_axes(x):
    if x.ndim < 2:
        raise DimensionError(f"batchnorm expects (B, C, ...), got {x.shape}")
    return (0,) + tuple(range(2, x.ndim))


def _channel_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x, scale, shift, mode="train", running: Optional[RunningStats] = None,
                      eps=1e-5):
    """Per-channel batch normalization followed by an affine map.

    In train mode batch statistics are used and, if ``running`` is given, its
    mean/var are updated in place with its momentum (unbiased variance).
    """
    axes = _bn_axes(x)
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"scale/shift must have shape ({C},)")
    if mode == "train":
        n = x.size // C
        if x.shape[0] < 2:
            raise StatisticsError("batchnorm in train mode needs a batch of at least 2")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        if running is not None:
            m = running.momentum
            running.mean[...] = (1 - m) * running.mean + m * mean
            running.var[...] = (1 - m) * running.var + m * var * n / max(n - 1, 1)
    elif mode == "eval":
        if running is None:
            raise UsageError("eval-mode batchnorm needs running statistics")
        mean = running.mean.astype(np.float64)
        var = running.var.astype(np.float64)
    else:
        raise UsageError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x - _channel_view(mean, x.ndim)) * _channel_view(inv_std, x.ndim)).astype(x.dtype)
    out = xhat * _channel_view(scale, x.ndim) + _channel_view(shift, x.ndim)
    return out.astype(x.dtype), BatchNormCache(xhat, inv_std.astype(x.dtype), mode, axes)


def batchnorm_adjoint(g, cache, scale):
    """Returns ``(g_x, g_scale, g_shift)``; exact in train mode, including
    the dependence of the batch mean and variance on ``x``."""
    if cache is None:
        raise UsageError("batchnorm_adjoint needs the forward cache")
    axes, nd = cache.axes, g.ndim
    g_shift = g.sum(axis=axes, dtype=np.float64)
    g_scale = (g * cache.xhat).sum(axis=axes, dtype=np.float64)
    g_xhat = g * _channel_view(scale, nd)
    inv_std = _channel_view(cache.inv_std, nd)
    if cache.mode == "train":
        n = g.size // g.shape[1]
        s1 = _channel_view(g_xhat.sum(axis=axes, dtype=np.float64), nd)
        s2 = _channel_view((g_xhat * cache.xhat).sum(axis=axes, dtype=np.float64), nd)
        g_x = inv_std * (g_xhat - s1 / n - cache.xhat * (s2 / n))
    else:
        g_x = g_xhat * inv_std
    dt = g.dtype
    return g_x.astype(dt), g_scale.astype(dt), g_shift.astype(dt)


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x
