import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ffebm.energies import HopfieldBlockParams, activation_apply
from ffebm.errors import DivergenceError, UsageError
from ffebm.feedforward import readout_loss
from ffebm.model import init_goe
from ffebm.solver import (NudgeSignal, RelaxationSettings, phases, relax, relax_last_block,
                          residual, zero_state)


def goe_block(rng, sizes=(6, 5), V=0.5, bias=False):
    shapes = [(n,) for n in sizes]
    ws = [init_goe((b, a), V, a, rng, np.float64) for a, b in zip(sizes, sizes[1:])]
    bs = [rng.normal(0, 0.1, size=n) if bias else None for n in sizes]
    return HopfieldBlockParams(shapes, ws, bs)


def free(T, schedule="asynchronous", init="zeros"):
    return RelaxationSettings(T, schedule, init, 0.0)


def test_settings_validation():
    with pytest.raises(UsageError):
        RelaxationSettings(0)
    with pytest.raises(UsageError):
        RelaxationSettings(5, beta=float("nan"))
    with pytest.raises(UsageError):
        RelaxationSettings(5, schedule="random")
    with pytest.raises(UsageError):
        RelaxationSettings(5, init="ones")


def test_phases_even_layers_first():
    assert phases(5, "asynchronous") == [(0, 2, 4), (1, 3)]
    assert phases(1, "asynchronous") == [(0,)]
    assert phases(3, "synchronous") == [(0, 1, 2)]


def test_single_layer_reaches_sigma_x_in_one_step():
    block = HopfieldBlockParams([(1,)], [], [None])
    x = np.array([[1.0]])
    seen = []
    s = relax(block, x, "laborieux", free(5), on_step=lambda t, s: seen.append(s[0].item()))
    assert seen == [0.5] * 5
    assert s[0].item() == 0.5


def test_zero_nudge_matches_free(rng):
    block = goe_block(rng, (4, 3, 5))
    x = rng.normal(size=(3, 4))
    a = relax(block, x, "ernoult", free(20))
    ds = NudgeSignal([np.zeros((3, 4)), np.zeros((3, 3)), np.zeros((3, 5))])
    b = relax(block, x, "ernoult", RelaxationSettings(20, "asynchronous", "zeros", 1e-8), ds)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_relax_converges_to_long_run(rng):
    block = goe_block(rng)
    x = rng.normal(size=(4, 6))
    s0 = zero_state(block, 4, np.float64)
    s = relax(block, x, "laborieux", free(60))
    long = relax(block, x, "laborieux", free(600))
    assert residual(block, s, x, "laborieux") < residual(block, s0, x, "laborieux")
    assert max(np.max(np.abs(a - b)) for a, b in zip(s, long)) <= 1e-4


@pytest.mark.parametrize("schedule", ["synchronous", "asynchronous"])
def test_fixed_point_is_stationary(rng, schedule):
    block = goe_block(rng, (5, 4, 3), bias=True)
    x = rng.normal(size=(2, 5))
    s = relax(block, x, "ernoult", free(400))
    assert residual(block, s, x, "ernoult") <= 1e-6
    for sched in ("synchronous", "asynchronous"):
        s2 = relax(block, x, "ernoult", RelaxationSettings(1, sched, "warm_start"), init_state=s)
        assert max(np.max(np.abs(a - b)) for a, b in zip(s, s2)) <= 1e-6


def test_warm_start_free_equilibrium_unchanged(rng):
    block = goe_block(rng)
    x = rng.normal(size=(3, 6))
    s = relax(block, x, "ernoult", free(300))
    nudge = NudgeSignal.on_last_layer(2, rng.normal(size=(3, 5)))
    s2 = relax(block, x, "ernoult", RelaxationSettings(20, init="warm_start", beta=0.0), nudge, s)
    for a, b in zip(s, s2):
        np.testing.assert_allclose(a, b, atol=1e-9)
    # warm start copies: the caller's state is not modified
    assert s2[0] is not s[0]


def test_nudge_requires_signal(rng):
    block = goe_block(rng)
    with pytest.raises(UsageError):
        relax(block, np.zeros((1, 6)), "ernoult", RelaxationSettings(3, beta=0.1))
    with pytest.raises(UsageError):
        relax(block, np.zeros((1, 6)), "ernoult", RelaxationSettings(3, beta=0.1),
              NudgeSignal([None]))


def test_divergence_reports_step():
    block = HopfieldBlockParams([(1,), (1,)], [np.array([[1e7]])])
    with pytest.raises(DivergenceError) as err:
        relax(block, np.array([[1.0]]), "ernoult", free(5))
    assert err.value.step == 1
    with pytest.raises(DivergenceError):
        relax(HopfieldBlockParams([(1,)], [], [None]), np.array([[np.nan]]), "ernoult", free(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["synchronous", "asynchronous"]),
       st.sampled_from(["ernoult", "laborieux"]), st.floats(0.0, 0.5))
def test_states_bounded(seed, schedule, act, beta):
    rng = np.random.default_rng(seed)
    block = goe_block(rng, (3, 4, 2), V=2.0, bias=True)
    x = rng.normal(0, 3, size=(2, 3))
    nudge = NudgeSignal.on_last_layer(3, rng.normal(0, 5, size=(2, 2)))
    s = relax(block, x, act, RelaxationSettings(7, schedule, "zeros", beta), nudge)
    for a in s:
        assert np.all((a >= 0) & (a <= 1))


# -- elastic nudging ----------------------------------------------------------

def test_elastic_zero_beta_is_free(rng):
    block = goe_block(rng)
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(4, 5))
    a = relax(block, x, "ernoult", free(30))
    b = relax_last_block(block, x, "ernoult", free(30), w, np.array([0, 1, 2]), 0.0)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_elastic_zero_force_keeps_equilibrium(rng):
    block = goe_block(rng)
    x = rng.normal(size=(2, 6))
    s = relax(block, x, "ernoult", free(300))
    w = rng.normal(size=(3, 5))
    logits = s[-1] @ w.T
    e = np.exp(logits - logits.max(1, keepdims=True))
    y = e / e.sum(1, keepdims=True)  # soft targets equal to the prediction
    s2 = relax_last_block(block, x, "ernoult", RelaxationSettings(20, init="warm_start"), w, y, 0.5,
                          init_state=s)
    for a, b in zip(s, s2):
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_elastic_vs_stationary_nudging(rng):
    block = goe_block(rng, (6, 5), V=0.3)
    x = rng.normal(0.5, 1, size=(4, 6))
    w = rng.normal(size=(3, 5))
    y = rng.integers(0, 3, size=4)
    s = relax(block, x, "ernoult", free(300))
    _, ds, _ = readout_loss(w, s[-1], y)
    gaps = []
    for beta in (0.05, 0.025):
        diffs = []
        for make in ("elastic", "stationary"):
            out = []
            for b in (beta, -beta):
                cfg = RelaxationSettings(200, init="warm_start", beta=b)
                if make == "elastic":
                    out.append(relax_last_block(block, x, "ernoult", cfg, w, y, b, init_state=s))
                else:
                    out.append(relax(block, x, "ernoult", cfg, NudgeSignal.on_last_layer(2, ds), s))
            # EP estimate of the theta gradient
            diffs.append(-(out[0][1].T @ out[0][0] - out[1][1].T @ out[1][0]) / (2 * beta))
        gaps.append(np.linalg.norm(diffs[0] - diffs[1]) / np.linalg.norm(diffs[1]))
    # the two schemes differ at order beta: halving beta halves the gap
    assert gaps[1] < 0.7 * gaps[0]
    assert gaps[0] < 0.2


# -- residual -------------------------------------------------------------------

def test_residual_examples():
    block = HopfieldBlockParams([(3,)], [], [None])
    x = np.array([[0.2, 0.5, 3.0]])
    assert residual(block, [activation_apply("laborieux", x)], x, "laborieux") == 0.0
    one = HopfieldBlockParams([(1,)], [], [None])
    assert residual(one, [np.zeros((1, 1))], np.array([[10.0]]), "laborieux") == 1.0


def test_residual_decreases_late_in_relaxation():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        block = goe_block(rng, (8, 6, 4), V=0.5)
        x = rng.normal(size=(2, 8))
        half = relax(block, x, "laborieux", free(10))
        full = relax(block, x, "laborieux", free(20))
        r_half, r_full = residual(block, half, x, "laborieux"), residual(block, full, x, "laborieux")
        assert r_full <= r_half
