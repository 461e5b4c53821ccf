"""AdamW update semantics and the cosine schedule."""

import numpy as np
import pytest

from demoe.optim import AdamW, OptimState, adamw_step, cosine_anneal
from demoe.tensor import ShapeError, Tensor


def _param(value, shape=(1, 2, 1, 1)):
    return Tensor(np.full(shape, value, np.float32), requires_grad=True)


def test_zero_gradient_zero_decay_leaves_params():
    p = _param(0.5)
    before = p.data.copy()
    state = OptimState()
    adamw_step([p], [np.zeros_like(p.data)], state, lr=1e-2)
    np.testing.assert_array_equal(p.data, before)
    assert state.t == 1


def test_first_step_is_signed_lr():
    g = np.array([[[[0.3]], [[-2.0]]]], np.float32)
    p = _param(1.0)
    before = p.data.copy()
    adamw_step([p], [g], OptimState(), lr=1e-3)
    update = before - p.data
    # first step: mhat = g, vhat = g^2, so the move is lr * g / (|g| + eps)
    np.testing.assert_allclose(update, 1e-3 * np.sign(g), rtol=1e-4)


def test_weight_decay_is_decoupled_and_applied_first():
    p = _param(2.0)
    g = np.zeros_like(p.data)
    adamw_step([p], [g], OptimState(weight_decay=0.1), lr=0.5)
    # zero gradient: only the decay term moves the parameter
    np.testing.assert_allclose(p.data, 2.0 - 0.5 * 0.1 * 2.0, rtol=1e-6)


def test_bias_correction_matches_manual_two_steps():
    rng = np.random.default_rng(0)
    g1 = rng.normal(size=(1, 3, 1, 1)).astype(np.float32)
    g2 = rng.normal(size=(1, 3, 1, 1)).astype(np.float32)
    p = _param(0.0, shape=(1, 3, 1, 1))
    state = OptimState(beta1=0.9, beta2=0.9, eps=1e-8)
    adamw_step([p], [g1], state, lr=1e-2)
    adamw_step([p], [g2], state, lr=1e-2)

    m = np.zeros_like(g1, dtype=np.float64)
    v = np.zeros_like(g1, dtype=np.float64)
    ref = np.zeros_like(g1, dtype=np.float64)
    for t, g in ((1, g1), (2, g2)):
        m = 0.9 * m + 0.1 * g
        v = 0.9 * v + 0.1 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.9**t)
        ref -= 1e-2 * mhat / (np.sqrt(vhat) + 1e-8)
    np.testing.assert_allclose(p.data, ref, atol=1e-6)


def test_identical_runs_bitwise_identical():
    def run():
        rng = np.random.default_rng(7)
        p = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32), requires_grad=True)
        state = OptimState(weight_decay=0.01)
        for step in range(5):
            g = rng.normal(size=p.data.shape).astype(np.float32)
            adamw_step([p], [g], state, lr=cosine_anneal(1e-3, 1e-6, step, 5))
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_shape_mismatch_rejected():
    p = _param(1.0)
    with pytest.raises(ShapeError, match="gradient shape"):
        adamw_step([p], [np.zeros((1, 3, 1, 1), np.float32)], OptimState(), lr=1e-3)


def test_adamw_wrapper_uses_param_grads():
    p = _param(1.0)
    opt = AdamW([p])
    p.grad[...] = 1.0
    opt.step(lr=1e-3)
    assert np.all(p.data < 1.0)
    opt.zero_grad()
    np.testing.assert_array_equal(p.grad, np.zeros_like(p.data))


class TestCosineAnneal:
    def test_endpoints_and_midpoint(self):
        assert cosine_anneal(1e-3, 1e-7, 0, 100) == pytest.approx(1e-3)
        assert cosine_anneal(1e-3, 1e-7, 100, 100) == pytest.approx(1e-7)
        assert cosine_anneal(1e-3, 1e-7, 50, 100) == pytest.approx((1e-3 + 1e-7) / 2)

    def test_monotone_decay(self):
        vals = [cosine_anneal(1e-3, 1e-6, t, 40) for t in range(41)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            cosine_anneal(1e-3, 1e-6, 11, 10)
        with pytest.raises(ValueError, match="lr0"):
            cosine_anneal(1e-7, 1e-3, 0, 10)
