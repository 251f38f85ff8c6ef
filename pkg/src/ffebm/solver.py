"""Fixed-point relaxation of EB blocks.

One step of the dynamics sets every layer to

    s_l <- sigma(x 1[l == 0] - grad_{s_l} U(s) - beta * ds_l)

either for all layers at once (synchronous) or first for layers 0, 2, 4, ...
and then for layers 1, 3, 5, ... using the freshly updated neighbours
(asynchronous).  Runs use a fixed number of steps.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .energies import activation_apply, check_state, layer_drives
from .errors import DivergenceError, UsageError
from .feedforward import readout_loss

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class RelaxationSettings:
    T: int
    schedule: str = "asynchronous"  # or "synchronous"
    init: str = "warm_start"  # or "zeros"
    beta: float = 0.0

    def __post_init__(self):
        if self.T < 1:
            raise UsageError("relaxation needs T >= 1")
        if not np.isfinite(self.beta):
            raise UsageError("beta must be finite")
        if self.schedule not in ("asynchronous", "synchronous"):
            raise UsageError(f"unknown schedule {self.schedule!r}")
        if self.init not in ("warm_start", "zeros"):
            raise UsageError(f"unknown init {self.init!r}")


@dataclass
class NudgeSignal:
    """Constant error signal; ``ds[l]`` is None for layers that are not nudged."""

    ds: List[Optional[np.ndarray]]

    @classmethod
    def on_last_layer(cls, num_layers, ds):
        return cls([None] * (num_layers - 1) + [ds])


@dataclass
class PhaseRecord:
    layers: tuple
    state: list  # state at the start of the phase
    pre: dict  # layer -> pre-activation
    idx: dict  # coupling -> pool indices used


def phases(num_layers, schedule):
    if schedule == "synchronous":
        return [tuple(range(num_layers))]
    even = tuple(range(0, num_layers, 2))
    odd = tuple(range(1, num_layers, 2))
    return [g for g in (even, odd) if g]


def zero_state(block, batch, dtype):
    return [np.zeros((batch,) + shape, dtype=dtype) for shape in block.layer_shapes]


def run_dynamics(block, x, act, T, schedule, state, force=None, record=None, on_step=None):
    """Core loop.  ``force(l, state)`` returns the (already beta-scaled)
    nudging term subtracted from layer ``l``'s pre-activation, or None.

    ``record`` (a list) receives one list of :class:`PhaseRecord` per step.
    ``on_step(t, state)`` is called after every completed step t = 1..T.
    """
    state = list(state)
    groups = phases(block.num_layers, schedule)
    for t in range(1, T + 1):
        step_rec = []
        for layers in groups:
            drives, used = layer_drives(block, state, layers)
            new = list(state)
            pres = {}
            for l in layers:
                a = drives[l]
                if l == 0:
                    a = a + x
                if force is not None:
                    f = force(l, state)
                    if f is not None:
                        a = a - f
                if not np.abs(a).max() <= DIVERGENCE_LIMIT:  # also catches NaN
                    raise DivergenceError("relaxation diverged", step=t)
                pres[l] = a
                new[l] = activation_apply(act, a)
            if record is not None:
                step_rec.append(PhaseRecord(layers, state, pres, dict(used)))
            state = new
        if record is not None:
            record.append(step_rec)
        if on_step is not None:
            on_step(t, state)
    return state


def _initial(block, x, settings, init_state):
    if settings.init == "warm_start" and init_state is not None:
        check_state(block, init_state)
        return [np.array(s, copy=True) for s in init_state]
    return zero_state(block, x.shape[0], x.dtype)


def _stationary_force(nudge, beta):
    if nudge is None or beta == 0.0:
        return None

    def force(l, state):
        ds = nudge.ds[l]
        return None if ds is None else beta * ds
    return force


def relax(block, x, act, settings, nudge=None, init_state=None, record=None, on_step=None):
    """Relax one block for ``settings.T`` steps with constant nudging
    ``+beta * ds``; returns the final state (every entry in [0, 1])."""
    if nudge is None and settings.beta != 0.0:
        raise UsageError("a nudge signal is required when beta != 0")
    if nudge is not None and len(nudge.ds) != block.num_layers:
        raise UsageError("nudge signal must list one entry per layer")
    state = _initial(block, x, settings, init_state)
    return run_dynamics(block, x, act, settings.T, settings.schedule, state,
                        _stationary_force(nudge, settings.beta), record, on_step)


def elastic_force(block, w_out, y, beta):
    """Nudging of the last layer by ``beta * grad_s loss(readout(s), y)``
    re-evaluated at the current state."""
    last = block.num_layers - 1

    def force(l, state):
        if l != last:
            return None
        _, g, _ = readout_loss(w_out, state[last], y)
        return beta * g
    return force


def relax_last_block(block, x, act, settings, w_out, y, beta, init_state=None,
                     record=None, on_step=None):
    state = _initial(block, x, settings, init_state)
    force = None if beta == 0.0 else elastic_force(block, w_out, y, beta)
    return run_dynamics(block, x, act, settings.T, settings.schedule, state, force, record, on_step)


def residual(block, state, x, act, nudge=None, beta=0.0):
    """L-infinity distance between ``state`` and one synchronous update of it."""
    drives, _ = layer_drives(block, state, range(block.num_layers))
    worst = 0.0
    for l, s in enumerate(state):
        a = drives[l] + (x if l == 0 else 0.0)
        if nudge is not None and nudge.ds[l] is not None:
            a = a - beta * nudge.ds[l]
        worst = max(worst, float(np.max(np.abs(s - activation_apply(act, a)))))
    return worst
