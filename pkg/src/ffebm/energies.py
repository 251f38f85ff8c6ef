"""Deep Hopfield Network energies and their analytic gradients.

A block holds layers ``s_0 .. s_{L-1}`` (batched arrays).  Adjacent layers
``l`` and ``l+1`` are coupled by ``theta_l``, either fully connected (a
matrix of shape ``(n_{l+1}, n_l)`` acting on flattened layers) or through a
3x3 convolution, optionally followed by 2x2 max pooling.  The interaction
energy per sample is

    U(s) = - sum_l <s_{l+1}, C_l(s_l)> - sum_l <b_l, s_l>

where ``C_l`` is the coupling map.  The feedforward drive ``x`` enters the
first layer only, so a block's energy is ``E = G(s) - <s_0, x> + U(s)``.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from . import tensor as tk
from .errors import DimensionError


class Activation(str, Enum):
    ERNOULT = "ernoult"
    LABORIEUX = "laborieux"

    @property
    def slope(self):
        return 1.0 if self is Activation.ERNOULT else 0.5


def activation_apply(act, x):
    if act == Activation.LABORIEUX:
        x = 0.5 * x
    else:
        Activation(act)
    # maximum/minimum avoid np.clip's dispatch overhead in the inner loop
    return np.minimum(np.maximum(x, 0.0), 1.0).astype(x.dtype, copy=False)


def activation_derivative(act, x):
    """Slope inside the linear region (boundaries included), 0 outside."""
    act = Activation(act)
    z = 0.5 * x if act is Activation.LABORIEUX else x
    inside = (z >= 0.0) & (z <= 1.0)
    return (inside * act.slope).astype(x.dtype)


def activation_inverse(act, s):
    """Inverse of the activation on [0, 1], used only for diagnostics."""
    return np.clip(s, 0.0, 1.0) / Activation(act).slope


def _G(act, s):
    s = np.clip(s, 0.0, 1.0)
    return 0.5 * s * s / Activation(act).slope


@dataclass
class HopfieldBlockParams:
    """Parameters of one EB block.

    ``layer_shapes`` are per-sample shapes; ``kinds[l]`` / ``pool_flags[l]``
    describe the coupling between layer ``l`` and ``l+1``.  The arrays in
    ``weights`` and ``biases`` are views into the model's parameter store.
    """

    layer_shapes: List[tuple]
    weights: List[np.ndarray] = field(default_factory=list)
    biases: List[Optional[np.ndarray]] = field(default_factory=list)
    kinds: List[str] = field(default_factory=list)
    pool_flags: List[bool] = field(default_factory=list)

    def __post_init__(self):
        L = len(self.layer_shapes)
        self.layer_shapes = [tuple(s) for s in self.layer_shapes]
        if not self.biases:
            self.biases = [None] * L
        if not self.kinds:
            self.kinds = [coupling_kind(a, b) for a, b in zip(self.layer_shapes, self.layer_shapes[1:])]
        if not self.pool_flags:
            self.pool_flags = [k == "conv" and a[1] != b[1]
                               for k, a, b in zip(self.kinds, self.layer_shapes, self.layer_shapes[1:])]
        if len(self.weights) != L - 1 or len(self.biases) != L:
            raise DimensionError("block needs L-1 weights and L bias slots")
        for l, w in enumerate(self.weights):
            want = coupling_weight_shape(self.layer_shapes[l], self.layer_shapes[l + 1], self.kinds[l])
            if w.shape != want:
                raise DimensionError(f"theta_{l} has shape {w.shape}, expected {want}")

    @property
    def num_layers(self):
        return len(self.layer_shapes)

    @property
    def has_bias(self):
        return any(b is not None for b in self.biases)


def coupling_kind(lower, upper):
    return "conv" if len(lower) == 3 and len(upper) == 3 else "fc"


def coupling_weight_shape(lower, upper, kind):
    if kind == "conv":
        C0, H0, W0 = lower
        C1, H1, W1 = upper
        pooled = H0 % 2 == 0 and W0 % 2 == 0 and (H1, W1) == (H0 // 2, W0 // 2)
        if (H1, W1) != (H0, W0) and not pooled:
            raise DimensionError(f"conv coupling {lower} -> {upper} is neither same-size nor 2x pooled")
        return (C1, C0, 3, 3)
    return (int(np.prod(upper)), int(np.prod(lower)))


def check_state(p, s):
    if len(s) != p.num_layers:
        raise DimensionError(f"state has {len(s)} layers, block has {p.num_layers}")
    B = s[0].shape[0]
    for l, (sl, shape) in enumerate(zip(s, p.layer_shapes)):
        if sl.shape != (B,) + shape:
            raise DimensionError(f"layer {l}: state {sl.shape} != {(B,) + shape}")


# -- coupling maps ------------------------------------------------------------

def couple_up(p, l, s_l):
    """``C_l(s_l)``, shaped like layer ``l+1``; returns (value, pool indices)."""
    w = p.weights[l]
    B = s_l.shape[0]
    if p.kinds[l] == "fc":
        out = s_l.reshape(B, -1) @ w.T
        return out.reshape((B,) + p.layer_shapes[l + 1]), None
    out = tk.conv2d(s_l, w, 1, 1)
    if p.pool_flags[l]:
        return tk.maxpool2d(out)
    return out, None


def couple_down(p, l, s_up, idx):
    """``C_l^T(s_up)``, shaped like layer ``l``; ``idx`` from :func:`couple_up`."""
    w = p.weights[l]
    B = s_up.shape[0]
    if p.kinds[l] == "fc":
        return (s_up.reshape(B, -1) @ w).reshape((B,) + p.layer_shapes[l])
    if p.pool_flags[l]:
        s_up = tk.maxpool2d_adjoint(s_up, idx)
    return tk.conv2d_input_adjoint(s_up, w, 1, 1, (B,) + p.layer_shapes[l])


def couple_weight_grad(p, l, s_l, s_up, idx):
    """Gradient of ``<s_up, C_l(s_l)>`` w.r.t. ``theta_l``, summed over batch."""
    B = s_l.shape[0]
    if p.kinds[l] == "fc":
        return s_up.reshape(B, -1).T @ s_l.reshape(B, -1)
    if p.pool_flags[l]:
        s_up = tk.maxpool2d_adjoint(s_up, idx)
    return tk.conv2d_weight_adjoint(s_up, s_l, 1, 1, kernel_size=3)


def layer_drives(p, s, layers, idx_cache=None):
    """``-grad_{s_l} U`` for each requested layer, from the current state.

    Returns ``(drives, used_idx)`` where ``used_idx`` maps coupling index to
    the pool indices evaluated at ``s``.
    """
    L = p.num_layers
    used = {} if idx_cache is None else idx_cache
    ups = {}

    def up(j):
        if j not in ups:
            ups[j], used[j] = couple_up(p, j, s[j])
        return ups[j]

    drives = {}
    for l in layers:
        d = None
        if l > 0:
            d = up(l - 1)
        if l < L - 1:
            if p.pool_flags[l] and l not in used:
                up(l)
            down = couple_down(p, l, s[l + 1], used.get(l))
            d = down if d is None else d + down
        if p.biases[l] is not None:
            d = (p.biases[l] if d is None else d + p.biases[l])
        if d is None:
            d = np.zeros_like(s[l])
        drives[l] = np.broadcast_to(d, s[l].shape) if d.shape != s[l].shape else d
    return drives, used


# -- energies -----------------------------------------------------------------

def hopfield_interaction_energy(p, s):
    """U(s) per batch element."""
    check_state(p, s)
    B = s[0].shape[0]
    u = np.zeros(B, dtype=np.float64)
    for l in range(p.num_layers - 1):
        c, _ = couple_up(p, l, s[l])
        u -= (s[l + 1] * c).reshape(B, -1).sum(axis=1, dtype=np.float64)
    for l, b in enumerate(p.biases):
        if b is not None:
            u -= (s[l] * b).reshape(B, -1).sum(axis=1, dtype=np.float64)
    return u


def grad_U_state(p, s):
    check_state(p, s)
    drives, _ = layer_drives(p, s, range(p.num_layers))
    return [-drives[l] for l in range(p.num_layers)]


def grad_E_params(p, s, x=None):
    """Gradients of the block energy w.r.t. (weights, biases), summed over
    the batch.  Independent of ``x``."""
    check_state(p, s)
    gw = []
    for l in range(p.num_layers - 1):
        idx = couple_up(p, l, s[l])[1] if p.pool_flags[l] else None
        gw.append(-couple_weight_grad(p, l, s[l], s[l + 1], idx))
    gb = [None if b is None else -s[l].sum(axis=0) for l, b in enumerate(p.biases)]
    return gw, gb


def grad_E_input(s):
    """``grad_x E = -s_0`` (the input-receiving layer)."""
    return -s[0]


def input_error(s_plus, s_minus, beta):
    """Centered estimate of the EB-block input error from two nudged states."""
    return -(s_plus[0] - s_minus[0]) / (2.0 * beta)


def primitive_phi(p, s, x):
    """Phi = <s_0, x> - U(s), per batch element."""
    B = s[0].shape[0]
    return (s[0] * x).reshape(B, -1).sum(axis=1, dtype=np.float64) - hopfield_interaction_energy(p, s)


def grad_phi_state(p, s, x):
    g = [-gl for gl in grad_U_state(p, s)]
    g[0] = g[0] + x
    return g


def block_energy(p, s, x, act):
    """E = G(s) - <s_0, x> + U(s) per batch element (diagnostic only)."""
    B = s[0].shape[0]
    g = sum(_G(act, sl).reshape(B, -1).sum(axis=1) for sl in s)
    return g - primitive_phi(p, s, x)


def grad_block_energy_state(p, s, x, act):
    """sigma^{-1}(s) - x 1_{layer 0} + grad U, valid for interior states."""
    gU = grad_U_state(p, s)
    out = [activation_inverse(act, sl) + gl for sl, gl in zip(s, gU)]
    out[0] = out[0] - x
    return out


def dense_theta(p):
    """Materialize the symmetric block-tridiagonal matrix of an FC block."""
    if any(k != "fc" for k in p.kinds):
        raise DimensionError("dense_theta is defined for fully connected blocks only")
    sizes = [int(np.prod(s)) for s in p.layer_shapes]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offs[-1])
    dtype = p.weights[0].dtype if p.weights else np.float64
    th = np.zeros((n, n), dtype=dtype)
    for l, w in enumerate(p.weights):
        th[offs[l + 1]:offs[l + 2], offs[l]:offs[l + 1]] = w
        th[offs[l]:offs[l + 1], offs[l + 1]:offs[l + 2]] = w.T
    return th
