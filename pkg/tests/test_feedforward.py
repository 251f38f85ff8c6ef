import numpy as np
import pytest

from ffebm import tensor as tk
from ffebm.errors import DataError, DimensionError, UsageError
from ffebm.feedforward import (FeedforwardBlockParams, ff_forward, ff_input_vjp, ff_param_vjp,
                               readout_loss, softmax)


def linear_block(rng, n_in=5, n_out=3, bias=True, bn=False):
    return FeedforwardBlockParams(
        "linear", rng.normal(size=(n_out, n_in)), rng.normal(size=n_out) if bias else None,
        bn_scale=rng.normal(size=n_out) if bn else None, bn_shift=rng.normal(size=n_out) if bn else None)


def conv_block(rng, cin=2, cout=3, pool=True, bn=True, stride=1, pad=1):
    return FeedforwardBlockParams(
        "conv_pool_bn", rng.normal(size=(cout, cin, 3, 3)),
        bn_scale=rng.normal(size=cout) if bn else None, bn_shift=rng.normal(size=cout) if bn else None,
        pool=pool, stride=stride, pad=pad)


BLOCKS = [
    ("linear", dict(), (4, 5)),
    ("linear_bn", dict(bn=True), (4, 5)),
    ("conv_pool_bn", dict(), (3, 2, 4, 4)),
    ("conv_bn", dict(pool=False), (3, 2, 4, 4)),
    ("conv_pool", dict(bn=False), (3, 2, 4, 4)),
    ("conv_stride2", dict(pool=False, stride=2, pad=0), (3, 2, 5, 5)),
]


def make(rng, name, kw):
    return (linear_block if name.startswith("linear") else conv_block)(rng, **kw)


def test_linear_identity_forward_and_vjp(rng):
    p = FeedforwardBlockParams("linear", np.eye(4))
    x = rng.normal(size=(3, 4))
    out, cache = ff_forward(p, x)
    np.testing.assert_array_equal(out, x)
    g = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ff_input_vjp(p, cache, g), g)


def test_conv_identity_composition(rng):
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    p = FeedforwardBlockParams("conv_pool_bn", w, bn_scale=np.ones(1), bn_shift=np.zeros(1))
    x = rng.normal(size=(16, 1, 4, 4))
    x = (x - x.mean()) / x.std()
    out, _ = ff_forward(p, x)
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_forward_matches_kernel_sequence(rng):
    p = conv_block(rng)
    x = rng.normal(size=(3, 2, 4, 4))
    out, _ = ff_forward(p, x)
    z = tk.conv2d(x, p.weight, 1, 1)
    z, _ = tk.maxpool2d(z)
    want, _ = tk.batchnorm_forward(z, p.bn_scale, p.bn_shift)
    np.testing.assert_array_equal(out, want)


def test_linear_param_vjp_is_outer_product(rng):
    p = linear_block(rng)
    x = rng.normal(size=(4, 5))
    _, cache = ff_forward(p, x)
    g = rng.normal(size=(4, 3))
    grads = ff_param_vjp(p, cache, g)
    np.testing.assert_allclose(grads["weight"], g.T @ x)
    np.testing.assert_allclose(grads["bias"], g.sum(0))


@pytest.mark.parametrize("name,kw,shape", BLOCKS)
def test_input_vjp_directional_fd(rng, name, kw, shape):
    p = make(rng, name, kw)
    x = rng.normal(size=shape)
    out, cache = ff_forward(p, x)
    up = rng.normal(size=out.shape)
    gx = ff_input_vjp(p, cache, up)
    eps = 1e-6
    for _ in range(20):
        v = rng.normal(size=shape)
        fd = np.sum(up * (ff_forward(p, x + eps * v)[0] - ff_forward(p, x - eps * v)[0])) / (2 * eps)
        assert abs(fd - np.sum(gx * v)) <= 1e-3 * max(abs(fd), 1e-6)


@pytest.mark.parametrize("name,kw,shape", BLOCKS)
def test_param_vjp_directional_fd(rng, name, kw, shape):
    p = make(rng, name, kw)
    x = rng.normal(size=shape)
    out, cache = ff_forward(p, x)
    up = rng.normal(size=out.shape)
    grads = ff_param_vjp(p, cache, up)
    eps = 1e-6
    for role, g in grads.items():
        arr = getattr(p, role)
        for _ in range(20):
            v = rng.normal(size=arr.shape)
            arr += eps * v
            hi = ff_forward(p, x)[0]
            arr -= 2 * eps * v
            lo = ff_forward(p, x)[0]
            arr += eps * v
            fd = np.sum(up * (hi - lo)) / (2 * eps)
            assert abs(fd - np.sum(g * v)) <= 1e-3 * max(abs(fd), 1e-6), role


@pytest.mark.parametrize("name,kw,shape", BLOCKS)
def test_zero_upstream(rng, name, kw, shape):
    p = make(rng, name, kw)
    out, cache = ff_forward(p, rng.normal(size=shape))
    z = np.zeros_like(out)
    assert not np.any(ff_input_vjp(p, cache, z))
    assert all(not np.any(g) for g in ff_param_vjp(p, cache, z).values())


def test_eval_mode_is_pure(rng):
    p = conv_block(rng)
    p.running = tk.RunningStats(rng.normal(size=3), rng.uniform(0.5, 2, size=3))
    before = p.running.mean.copy()
    x = rng.normal(size=(2, 2, 4, 4))
    a, _ = ff_forward(p, x, mode="eval")
    b, _ = ff_forward(p, x, mode="eval")
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(p.running.mean, before)


def test_stale_cache_rejected(rng):
    p = linear_block(rng)
    out, cache = ff_forward(p, rng.normal(size=(2, 5)))
    p.version += 1
    with pytest.raises(UsageError):
        ff_input_vjp(p, cache, out)
    with pytest.raises(UsageError):
        ff_param_vjp(p, None, out)


def test_shape_errors(rng):
    p = linear_block(rng)
    with pytest.raises(DimensionError):
        ff_forward(p, np.zeros((2, 4)))
    _, cache = ff_forward(p, np.zeros((2, 5)))
    with pytest.raises(DimensionError):
        ff_input_vjp(p, cache, np.zeros((2, 4)))
    with pytest.raises(UsageError):
        ff_forward(FeedforwardBlockParams("attention", np.eye(2)), np.zeros((2, 2)))


# -- readout --------------------------------------------------------------------

def test_uniform_logits_loss_is_log_c():
    loss, _, _ = readout_loss(np.zeros((7, 4)), np.ones((3, 4)), np.array([0, 3, 6]))
    assert loss == pytest.approx(np.log(7))


def test_perfect_prediction_has_zero_grad():
    # one-hot targets equal to the softmax itself
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    s = np.array([[0.3, -0.2]])
    y = softmax(s @ w.T)
    _, gs, gw = readout_loss(w, s, y)
    np.testing.assert_allclose(gs, 0.0, atol=1e-15)
    np.testing.assert_allclose(gw, 0.0, atol=1e-15)


def test_readout_fd(rng):
    w = rng.normal(size=(4, 6))
    s = rng.uniform(size=(5, 6))
    y = rng.integers(0, 4, size=5)
    _, gs, gw = readout_loss(w, s, y)
    eps = 1e-5
    for arr, g in ((s, gs), (w, gw)):
        for _ in range(10):
            v = rng.normal(size=arr.shape)
            arr += eps * v
            hi = readout_loss(w, s, y)[0]
            arr -= 2 * eps * v
            lo = readout_loss(w, s, y)[0]
            arr += eps * v
            fd = (hi - lo) / (2 * eps)
            assert abs(fd - np.sum(g * v)) <= 1e-3 * abs(fd)


def test_readout_label_errors():
    w = np.zeros((3, 2))
    with pytest.raises(DataError):
        readout_loss(w, np.zeros((2, 2)), np.array([0, 3]))
    with pytest.raises(DataError):
        readout_loss(w, np.zeros((2, 2)), np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        readout_loss(w, np.zeros((2, 5)), np.array([0, 1]))
