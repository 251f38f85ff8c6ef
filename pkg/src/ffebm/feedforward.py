"""Feedforward tie blocks (linear, or conv -> max-pool -> batchnorm) and the
softmax readout with cross-entropy loss, with their vector-Jacobian
products."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tk
from .errors import DataError, DimensionError, UsageError


@dataclass
class FeedforwardBlockParams:
    kind: str  # "linear" | "conv_pool_bn"
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    bn_scale: Optional[np.ndarray] = None
    bn_shift: Optional[np.ndarray] = None
    running: Optional[tk.RunningStats] = None
    pool: bool = False
    stride: int = 1
    pad: int = 1
    version: int = 0

    @property
    def batchnorm(self):
        return self.bn_scale is not None


@dataclass
class ForwardCache:
    inp: np.ndarray
    pre_pool_shape: Optional[tuple]
    pool_idx: Optional[tk.PoolIndices]
    pre_bn: np.ndarray
    bn: Optional[tk.BatchNormCache]
    version: int


def ff_forward(p, inp, mode="train", update_running=True):
    """Apply the block; returns ``(output, cache)``."""
    B = inp.shape[0]
    pre_pool_shape, idx = None, None
    if p.kind == "linear":
        flat = inp.reshape(B, -1)
        if flat.shape[1] != p.weight.shape[1]:
            raise DimensionError(f"linear block expects {p.weight.shape[1]} inputs, got {flat.shape[1]}")
        z = flat @ p.weight.T
        if p.bias is not None:
            z = z + p.bias
    elif p.kind == "conv_pool_bn":
        z = tk.conv2d(inp, p.weight, p.stride, p.pad)
        if p.pool:
            pre_pool_shape = z.shape
            z, idx = tk.maxpool2d(z)
    else:
        raise UsageError(f"unknown feedforward kind {p.kind!r}")
    bn_cache = None
    out = z
    if p.batchnorm:
        out, bn_cache = tk.batchnorm_forward(z, p.bn_scale, p.bn_shift, mode,
                                             p.running if (update_running or mode == "eval") else None)
    return out, ForwardCache(inp, pre_pool_shape, idx, z, bn_cache, p.version)


def _check(p, cache, upstream):
    if cache is None or cache.version != p.version:
        raise UsageError("forward cache is stale: parameters changed since it was recorded")
    if upstream.shape != cache.pre_bn.shape:
        raise DimensionError(f"upstream {upstream.shape} != block output {cache.pre_bn.shape}")


def _through_bn(p, cache, upstream):
    if p.batchnorm:
        return tk.batchnorm_adjoint(upstream, cache.bn, p.bn_scale)
    return upstream, None, None


def ff_input_vjp(p, cache, upstream):
    """``dF/d(input)^T @ upstream``."""
    _check(p, cache, upstream)
    g, _, _ = _through_bn(p, cache, upstream)
    B = g.shape[0]
    if p.kind == "linear":
        return (g.reshape(B, -1) @ p.weight).reshape(cache.inp.shape)
    if p.pool:
        g = tk.maxpool2d_adjoint(g, cache.pool_idx, cache.pre_pool_shape)
    return tk.conv2d_input_adjoint(g, p.weight, p.stride, p.pad, cache.inp.shape)


def ff_param_vjp(p, cache, upstream):
    """``dF/d(omega)^T @ upstream`` as a dict keyed by parameter role."""
    _check(p, cache, upstream)
    g, g_scale, g_shift = _through_bn(p, cache, upstream)
    B = g.shape[0]
    grads = {}
    if p.kind == "linear":
        grads["weight"] = g.reshape(B, -1).T @ cache.inp.reshape(B, -1)
        if p.bias is not None:
            grads["bias"] = g.sum(axis=0)
    else:
        if p.pool:
            g = tk.maxpool2d_adjoint(g, cache.pool_idx, cache.pre_pool_shape)
        grads["weight"] = tk.conv2d_weight_adjoint(g, cache.inp, p.stride, p.pad,
                                                   kernel_size=p.weight.shape[-1])
    if p.batchnorm:
        grads["bn_scale"] = g_scale
        grads["bn_shift"] = g_shift
    return grads


def readout_logits(w_out, s):
    return s.reshape(s.shape[0], -1) @ w_out.T


def _targets(y, B, C):
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape != (B, C):
            raise DataError(f"one-hot labels {y.shape} != {(B, C)}")
        return y.astype(np.float64)
    if y.shape != (B,):
        raise DataError(f"expected {B} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise DataError(f"label outside [0, {C})")
    onehot = np.zeros((B, C))
    onehot[np.arange(B), y.astype(np.int64)] = 1.0
    return onehot


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def readout_loss(w_out, s, y):
    """Mean softmax cross-entropy of ``w_out @ s`` against labels ``y``.

    Returns ``(loss, grad_s, grad_w_out)``; ``grad_s`` has the shape of ``s``.
    """
    B = s.shape[0]
    flat = s.reshape(B, -1)
    if flat.shape[1] != w_out.shape[1]:
        raise DimensionError(f"readout expects {w_out.shape[1]} features, got {flat.shape[1]}")
    logits = flat.astype(np.float64) @ w_out.T.astype(np.float64)
    t = _targets(y, B, w_out.shape[0])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-(t * logp).sum() / B)
    err = (np.exp(logp) - t) / B
    grad_s = (err @ w_out.astype(np.float64)).reshape(s.shape).astype(s.dtype)
    grad_w = (err.T @ flat.astype(np.float64)).astype(w_out.dtype)
    return loss, grad_s, grad_w
