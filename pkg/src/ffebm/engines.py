"""Gradient engines for ff-EBMs.

* ``ep_gradients_implicit`` / ``ep_gradients_explicit``: centered EP inside
  every EB block chained with backprop through the feedforward blocks.
* ``id_gradients``: reverse-mode differentiation through ``T_nudge``
  fixed-point steps re-executed from the equilibria (recurrent backprop),
  with hand-written step adjoints.
* ``finite_difference_gradients``: central differences of the whole
  pipeline, used as an independent oracle.
* ``analytic_backprop``: plain backprop for models whose EB blocks are
  single layers (the feedforward special case).

All engines return a ``GradientSet``: a dict from parameter name to the
gradient of the batch-mean loss, covering every trainable parameter.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import energies as en
from .errors import DivergenceError, PreconditionError, UsageError
from .feedforward import ff_forward, ff_input_vjp, ff_param_vjp, readout_loss
from .model import forward_inference
from .solver import (NudgeSignal, RelaxationSettings, elastic_force, relax,
                     relax_last_block, residual, run_dynamics)
from .tensor import maxpool2d_gather, conv2d

GradientSet = Dict[str, np.ndarray]

ENGINES = ("ep_implicit", "ep_explicit", "id", "fd")
CONVERGENCE_TOL = 1e-3


@dataclass(frozen=True)
class EngineSettings:
    beta: float = 0.2
    T_free: int = 60
    T_nudge: int = 20
    engine: str = "ep_implicit"
    schedule: Optional[str] = None  # defaults to the model's schedule
    last_block_nudge: str = "elastic"  # or "stationary"
    require_convergence: bool = True  # ID refuses unconverged equilibria

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise UsageError(f"unknown engine {self.engine!r}")
        if self.engine.startswith("ep") and not self.beta > 0:
            raise UsageError("EP engines need beta > 0")
        if self.T_nudge < 1 or self.T_free < 1:
            raise UsageError("iteration counts must be >= 1")
        if self.last_block_nudge not in ("elastic", "stationary"):
            raise UsageError(f"unknown last-block nudging {self.last_block_nudge!r}")

    @classmethod
    def from_model(cls, model, **overrides):
        cfg = model.config
        base = dict(beta=cfg.beta, T_free=cfg.T_free, T_nudge=cfg.T_nudge)
        base.update(overrides)
        return cls(**base)


def _schedule(model, settings):
    return settings.schedule or model.config.schedule


def _ff_grads_into(grads, model, k, g):
    for role, v in g.items():
        grads[model.param_name(k, "ff", role)] = v


def _eb_grads_into(grads, model, k, gw, gb):
    for l, v in enumerate(gw):
        grads[model.param_name(k, "eb", "theta", l)] = v
    for l, v in enumerate(gb):
        if v is not None:
            grads[model.param_name(k, "eb", "bias", l)] = v


def _ordered(model, grads):
    return {k: grads[k] for k in model.store.trainable_keys()}


# -- EP ---------------------------------------------------------------------------

@dataclass
class NudgedPair:
    plus: list
    minus: list
    trajectories: Optional[tuple] = None  # (plus states t=0..T, minus states t=0..T)


def nudged_pair(model, record, k, ds, y, settings, keep_trajectories=False):
    """Relax block ``k`` at +beta and -beta, warm-started from its free
    equilibrium.  The last block is nudged by the loss itself (elastic) unless
    ``settings.last_block_nudge == 'stationary'``; other blocks by ``ds`` on
    their last layer."""
    block = model.eb_params(k)
    xk = record.xs[k]
    beta = settings.beta
    last = k == model.num_blocks - 1
    rs = RelaxationSettings(settings.T_nudge, _schedule(model, settings), "warm_start", 0.0)
    out = []
    for b in (beta, -beta):
        traj = [record.states[k]] if keep_trajectories else None
        on_step = (lambda t, s: traj.append(s)) if keep_trajectories else None
        try:
            if last and settings.last_block_nudge == "elastic":
                s = relax_last_block(block, xk, model.act, rs, model.w_out, y, b,
                                     init_state=record.states[k], on_step=on_step)
            else:
                nudge = NudgeSignal.on_last_layer(block.num_layers, ds)
                s = relax(block, xk, model.act, RelaxationSettings(rs.T, rs.schedule, rs.init, b),
                          nudge, init_state=record.states[k], on_step=on_step)
        except DivergenceError as e:
            e.block, e.beta = k + 1, b
            raise
        out.append((s, traj))
    (sp, tp), (sm, tm) = out
    return NudgedPair(sp, sm, (tp, tm) if keep_trajectories else None)


def ep_block_gradients(model, record, k, s_plus, s_minus, beta, explicit=False):
    """Centered EP estimates for block ``k`` from a pair of nudged states.

    Returns ``(theta_grads, bias_grads, ff_grads, ds_prev)``.
    """
    block = model.eb_params(k)
    gw_p, gb_p = en.grad_E_params(block, s_plus)
    gw_m, gb_m = en.grad_E_params(block, s_minus)
    two_beta = 2.0 * beta
    gw = [(a - b) / two_beta for a, b in zip(gw_p, gw_m)]
    gb = [None if a is None else (a - b) / two_beta for a, b in zip(gb_p, gb_m)]
    ffp = model.ff_params(k)
    cache = record.caches[k]
    if explicit:
        dx = en.input_error(s_plus, s_minus, beta)
        g_ff = ff_param_vjp(ffp, cache, dx)
        ds_prev = ff_input_vjp(ffp, cache, dx)
    else:
        # gradients of the augmented energy w.r.t. the feedforward weights and
        # the previous block's state, evaluated at each nudged state
        up_p = en.grad_E_input(s_plus)
        up_m = en.grad_E_input(s_minus)
        fp = ff_param_vjp(ffp, cache, up_p)
        fm = ff_param_vjp(ffp, cache, up_m)
        g_ff = {r: (fp[r] - fm[r]) / two_beta for r in fp}
        ds_prev = (ff_input_vjp(ffp, cache, up_p) - ff_input_vjp(ffp, cache, up_m)) / two_beta
    return gw, gb, g_ff, ds_prev


def _readout_grad(model, s_plus, s_minus, y):
    _, _, gp = readout_loss(model.w_out, s_plus[-1], y)
    _, _, gm = readout_loss(model.w_out, s_minus[-1], y)
    return 0.5 * (gp + gm)


def _ep(model, record, y, settings, explicit, keep_trajectories=False):
    N = model.num_blocks
    grads = {}
    _, ds, _ = readout_loss(model.w_out, record.states[-1][-1], y)
    ds_list = [None] * N
    pairs = [None] * N
    for k in range(N - 1, -1, -1):
        ds_list[k] = ds
        pair = nudged_pair(model, record, k, ds, y, settings, keep_trajectories)
        pairs[k] = pair
        if k == N - 1:
            grads["readout.weight"] = _readout_grad(model, pair.plus, pair.minus, y)
        gw, gb, g_ff, ds = ep_block_gradients(model, record, k, pair.plus, pair.minus,
                                              settings.beta, explicit)
        _eb_grads_into(grads, model, k, gw, gb)
        _ff_grads_into(grads, model, k, g_ff)
    return _ordered(model, grads), ds_list, pairs


def ep_gradients_implicit(model, record, y, settings):
    """Implicit BP-EP chaining.  Returns ``(grads, ds_list)`` where
    ``ds_list[k]`` is the error signal that nudged block ``k``."""
    grads, ds_list, _ = _ep(model, record, y, settings, explicit=False)
    return grads, ds_list


def ep_gradients_explicit(model, record, y, settings):
    """Explicit BP-EP chaining: EB-block input errors are formed first and then
    backpropagated through the feedforward blocks."""
    grads, _, _ = _ep(model, record, y, settings, explicit=True)
    return grads


# -- implicit differentiation --------------------------------------------------------

def _down_transpose(p, l, mu, idx):
    """Adjoint of ``v -> couple_down(p, l, v, idx)`` (shaped like layer l+1)."""
    B = mu.shape[0]
    if p.kinds[l] == "fc":
        return (mu.reshape(B, -1) @ p.weights[l].T).reshape((B,) + p.layer_shapes[l + 1])
    c = conv2d(mu, p.weights[l], 1, 1)
    return maxpool2d_gather(c, idx) if p.pool_flags[l] else c


def phase_adjoint(p, act, phase, lam, gw, gb):
    """Pull the adjoint ``lam`` back through one (partial) update phase.

    Accumulates parameter sensitivities into ``gw``/``gb`` in place and
    returns ``(lam_before, mu_0)`` where ``mu_0`` is the sensitivity of the
    input layer's pre-activation (None if layer 0 was not updated).
    """
    L = p.num_layers
    S = phase.state
    new = [None if l in phase.layers else lam[l] for l in range(L)]
    mus = {}
    for l in phase.layers:
        mus[l] = en.activation_derivative(act, phase.pre[l]) * lam[l]

    def add(j, v):
        new[j] = v if new[j] is None else new[j] + v

    for l, mu in mus.items():
        if l > 0:
            idx = phase.idx.get(l - 1)
            add(l - 1, en.couple_down(p, l - 1, mu, idx))
            gw[l - 1] += en.couple_weight_grad(p, l - 1, S[l - 1], mu, idx)
        if l < L - 1:
            idx = phase.idx.get(l)
            add(l + 1, _down_transpose(p, l, mu, idx))
            gw[l] += en.couple_weight_grad(p, l, mu, S[l + 1], idx)
        if p.biases[l] is not None:
            gb[l] += mu.sum(axis=0)
    for j in range(L):
        if new[j] is None:
            new[j] = np.zeros_like(S[j])
    return new, mus.get(0)


@dataclass
class IDBlockPass:
    """Per-step sensitivities of one block, in backward order (t = T first)."""

    steps: List[tuple] = field(default_factory=list)  # (gw, gb, dx) per step


def id_block_backward(model, k, xk, s_star, lam_last, settings, record_steps=False):
    """Re-run ``T_nudge`` steps from ``s_star`` and backpropagate ``lam_last``
    (the loss sensitivity of the block's last layer) through them.

    Returns ``(gw, gb, dx, final_state, steps)``.
    """
    p = model.eb_params(k)
    act = model.act
    rec = []
    final = run_dynamics(p, xk, act, settings.T_nudge, _schedule(model, settings),
                         list(s_star), record=rec)
    L = p.num_layers
    lam = [np.zeros_like(s) for s in final]
    lam[-1] = lam_last if not callable(lam_last) else lam_last(final)
    gw = [np.zeros_like(w) for w in p.weights]
    gb = [None if b is None else np.zeros_like(b) for b in p.biases]
    dx = np.zeros_like(xk)
    steps = []
    for t in range(len(rec) - 1, -1, -1):
        sw = [np.zeros_like(w) for w in p.weights]
        sb = [None if b is None else np.zeros_like(b) for b in p.biases]
        sdx = np.zeros_like(xk)
        for phase in reversed(rec[t]):
            lam, mu0 = phase_adjoint(p, act, phase, lam, sw, sb)
            if mu0 is not None:
                sdx += mu0
        if not all(np.all(np.isfinite(v)) for v in lam):
            raise DivergenceError("adjoint pass diverged", step=t + 1, block=k + 1)
        for a, b in zip(gw, sw):
            a += b
        for a, b in zip(gb, sb):
            if a is not None:
                a += b
        dx += sdx
        if record_steps:
            steps.append((sw, sb, sdx))
    return gw, gb, dx, final, steps


def _check_converged(model, record):
    for k in range(model.num_blocks):
        r = residual(model.eb_params(k), record.states[k], record.xs[k], model.act)
        if r > CONVERGENCE_TOL:
            raise PreconditionError(f"block {k + 1} is not at equilibrium (residual {r:.3g})")


def _id(model, record, y, settings, record_steps=False):
    if settings.require_convergence:
        _check_converged(model, record)
    N = model.num_blocks
    grads = {}
    passes = [None] * N
    ds = None
    for k in range(N - 1, -1, -1):
        if k == N - 1:
            holder = {}

            def seed(final):
                _, g_s, g_w = readout_loss(model.w_out, final[-1], y)
                holder["w"] = g_w
                return g_s
            lam = seed
        else:
            lam = ds
        gw, gb, dx, _, steps = id_block_backward(model, k, record.xs[k], record.states[k],
                                                 lam, settings, record_steps)
        if k == N - 1:
            grads["readout.weight"] = holder["w"]
        passes[k] = steps
        _eb_grads_into(grads, model, k, gw, gb)
        ffp = model.ff_params(k)
        _ff_grads_into(grads, model, k, ff_param_vjp(ffp, record.caches[k], dx))
        ds = ff_input_vjp(ffp, record.caches[k], dx)
    return _ordered(model, grads), passes


def id_gradients(model, record, y, settings):
    grads, _ = _id(model, record, y, settings)
    return grads


# -- oracles ------------------------------------------------------------------------

def pipeline_loss(model, x, y, T=None, schedule=None, mode="train"):
    rec = forward_inference(model, x, mode=mode, update_running=False, T=T, schedule=schedule)
    return readout_loss(model.w_out, rec.states[-1][-1], y)[0]


def finite_difference_gradients(model, x, y, eps=1e-4, subset=None, T=None, schedule=None):
    """Central differences of the pipeline loss.

    ``subset`` maps parameter names to ``None`` (every entry; full-shaped
    result) or to a sequence of flat indices (result holds those entries in
    order).  ``None`` means every trainable parameter.  Parameters are
    restored bit-exactly afterwards.
    """
    if subset is None:
        subset = {k: None for k in model.store.trainable_keys()}
    elif not isinstance(subset, dict):
        subset = {k: None for k in subset}
    out = {}
    for name, entries in subset.items():
        arr = model.store[name]
        flat = arr.reshape(-1)
        idx = range(flat.size) if entries is None else list(entries)
        vals = np.zeros(len(idx), dtype=np.float64)
        for i, j in enumerate(idx):
            orig = flat[j].copy()
            flat[j] = orig + eps
            lp = pipeline_loss(model, x, y, T, schedule)
            flat[j] = orig - eps
            lm = pipeline_loss(model, x, y, T, schedule)
            flat[j] = orig
            vals[i] = (lp - lm) / (2 * eps)
        out[name] = vals.reshape(arr.shape) if entries is None else vals
    return out


def analytic_backprop(model, x, y, mode="train"):
    """Exact backprop through the feedforward reduction (single-layer EB
    blocks without biases, so each block's equilibrium is sigma(x^k))."""
    for k, pair in enumerate(model.config.blocks):
        if len(pair.eb.layers) != 1 or pair.eb.bias:
            raise PreconditionError(f"block {k + 1} is not a single bias-free layer")
    act = model.act
    s = np.asarray(x, dtype=model.dtype)
    xs, caches = [], []
    for k in range(model.num_blocks):
        xk, cache = ff_forward(model.ff_params(k), s, mode, update_running=False)
        xs.append(xk)
        caches.append(cache)
        s = en.activation_apply(act, xk)
    _, ds, g_w = readout_loss(model.w_out, s, y)
    grads = {"readout.weight": g_w}
    for k in range(model.num_blocks - 1, -1, -1):
        dx = en.activation_derivative(act, xs[k]) * ds
        ffp = model.ff_params(k)
        _ff_grads_into(grads, model, k, ff_param_vjp(ffp, caches[k], dx))
        ds = ff_input_vjp(ffp, caches[k], dx)
    return _ordered(model, grads)


def compute_gradients(model, x, y, settings, record=None):
    """Run free inference (if needed) and the engine named in ``settings``.

    Returns ``(grads, record, loss)``.
    """
    if settings.engine == "fd":
        grads = finite_difference_gradients(model, x, y, T=settings.T_free,
                                            schedule=settings.schedule)
        return grads, record, None
    if record is None:
        record = forward_inference(model, x, mode="train", T=settings.T_free,
                                   schedule=settings.schedule)
    loss = readout_loss(model.w_out, record.states[-1][-1], y)[0]
    if settings.engine == "ep_implicit":
        grads, _ = ep_gradients_implicit(model, record, y, settings)
    elif settings.engine == "ep_explicit":
        grads = ep_gradients_explicit(model, record, y, settings)
    else:
        grads = id_gradients(model, record, y, settings)
    return grads, record, loss


def rel_l2(a, b, floor=1e-30):
    """||a - b|| / ||b||; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    nb = np.linalg.norm(b)
    nd = np.linalg.norm(a - b)
    if nb <= floor:
        return 0.0 if nd <= floor else float("inf")
    return float(nd / nb)
