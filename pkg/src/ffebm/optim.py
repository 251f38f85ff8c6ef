"""Adam with decoupled weight decay, and cosine learning-rate annealing."""

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import UsageError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 3e-4
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store, grads, state):
    """Update the trainable tensors of ``store`` in place.

    The decay shrinks each parameter by ``(1 - lr * weight_decay)`` before the
    moment update.  Parameters without a gradient are left alone.
    """
    for name, g in grads.items():
        if name not in store or not store.is_trainable(name):
            raise UsageError(f"gradient for unknown or frozen parameter {name!r}")
        if g.shape != store[name].shape:
            raise UsageError(f"{name}: gradient {g.shape} != parameter {store[name].shape}")
    state.step += 1
    t = state.step
    lr = state.lr
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = store[name]
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        if state.weight_decay:
            p *= p.dtype.type(1.0 - lr * state.weight_decay)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    store.version += 1
    return store, state


def cosine_lr(step, total, lr0, lr_min=0.0):
    """Cosine annealing without restarts; clamps to ``lr_min`` past ``total``."""
    if total <= 0 or step >= total:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))
