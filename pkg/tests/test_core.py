import math

import numpy as np
import pytest

from csefsl.errors import DataError, InternalConsistencyError, TrainingAborted
from csefsl.nn import core
from csefsl.nn.layers import Conv2D, Dense, Dropout, Flatten, LocalResponseNorm, MaxPool2D, ReLU, init_params
from csefsl.nn.schedule import LrSchedule


def test_zero_upstream_gives_zero_grads():
    stack = (Dense(3, 4), ReLU(), Dense(4, 2))
    params = init_params(stack, 0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    cache, out = core.forward(stack, params, x)
    grads, dx = core.backward(stack, params, cache, np.zeros_like(out))
    assert all(not np.any(g) for entry in grads for g in entry)
    assert not np.any(dx)


def test_scalar_chain_rule():
    stack = (Dense(1, 1, False),)
    params = [[np.array([[2.0]])]]
    cache, _ = core.forward(stack, params, np.array([[3.0]]))
    grads, dx = core.backward(stack, params, cache, np.array([[1.0]]))
    assert grads[0][0][0, 0] == 3.0
    assert dx[0, 0] == 2.0


def test_backward_rejects_foreign_cache():
    stack = (Dense(2, 2),)
    p1, p2 = init_params(stack, 0), init_params(stack, 1)
    cache, out = core.forward(stack, p1, np.ones((1, 2)))
    with pytest.raises(InternalConsistencyError):
        core.backward(stack, p2, cache, np.ones_like(out))
    with pytest.raises(InternalConsistencyError):
        core.backward(stack, p1, cache, np.ones((3, 2)))


def test_sgd_step_arithmetic():
    new = core.sgd_step([[np.array([1.0, 2.0])]], [[np.array([1.0, 1.0])]], 0.1)
    np.testing.assert_allclose(new[0][0], [0.9, 1.9])
    same = core.sgd_step([[np.array([1.0, 2.0])]], [[np.zeros(2)]], 0.3)
    np.testing.assert_array_equal(same[0][0], [1.0, 2.0])


def test_two_sgd_steps_hand_trace():
    # f(p) = 0.5 * p^2, grad = p; two steps with lr then lr'
    p = [[np.array([4.0])]]
    p1 = core.sgd_step(p, [[p[0][0]]], 0.5)
    p2 = core.sgd_step(p1, [[p1[0][0]]], 0.25)
    assert p2[0][0][0] == pytest.approx(4.0 * 0.5 * 0.75)
    # accumulating both gradients at the start point differs
    acc = core.sgd_step(p, [[2 * p[0][0]]], 0.5)
    assert acc[0][0][0] != p2[0][0][0]


def test_sgd_aborts_on_non_finite():
    with pytest.raises(TrainingAborted):
        core.sgd_step([[np.zeros(2)]], [[np.array([np.nan, 0.0])]], 0.1)


def test_softmax_xent_uniform_and_saturated():
    for k in (2, 5, 10):
        loss, _ = core.softmax_xent(np.zeros((3, k)), np.zeros(3, dtype=int))
        assert loss == pytest.approx(math.log(k))
    loss, _ = core.softmax_xent(np.array([[1e3, -1e3]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_softmax_xent_gradient_matches_finite_differences(rng):
    logits = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, size=6)
    _, d = core.softmax_xent(logits, labels)
    eps = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[idx] += eps
        minus[idx] -= eps
        num[idx] = (core.softmax_xent(plus, labels)[0] - core.softmax_xent(minus, labels)[0]) / (2 * eps)
    np.testing.assert_allclose(d, num, atol=1e-6)


def test_out_of_range_label():
    with pytest.raises(DataError):
        core.softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


def test_clip_by_global_norm():
    g = [[np.array([6.0, 8.0])]]
    clipped = core.clip_by_global_norm(g, 1.0)
    np.testing.assert_allclose(clipped[0][0], [0.6, 0.8])
    assert core.global_norm(clipped) == pytest.approx(1.0)
    assert core.clip_by_global_norm(g, 20.0) is g
    assert core.clip_by_global_norm(g, float("inf")) is g


def test_lrn_matches_brute_force(rng):
    layer = LocalResponseNorm(depth_radius=2, alpha_n=0.3, beta_n=0.75, bias_n=1.5)
    x = rng.normal(size=(2, 5, 3, 3))
    _, out = core.forward((layer,), [[]], x)
    ref = np.empty_like(x)
    for c in range(5):
        lo, hi = max(0, c - 2), min(5, c + 3)
        sq = (x[:, lo:hi] ** 2).sum(axis=1)
        ref[:, c] = x[:, c] / (1.5 + 0.3 * sq) ** 0.75
    np.testing.assert_allclose(out, ref, rtol=1e-13)


def test_dropout_only_in_train_mode_and_seeded():
    stack = (Dropout(0.5),)
    x = np.ones((4, 10))
    _, eval_out = core.forward(stack, [[]], x, train_mode=False)
    np.testing.assert_array_equal(eval_out, x)
    _, a = core.forward(stack, [[]], x, train_mode=True, rng_seed=3)
    _, b = core.forward(stack, [[]], x, train_mode=True, rng_seed=3)
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


@pytest.mark.parametrize("stack,shape", [
    ((Dense(4, 3), ReLU(), Dense(3, 2)), (4,)),
    ((Conv2D(1, 1, 2, 3), Flatten(), Dense(3 * 4 * 4, 2)), (2, 4, 4)),
    ((Conv2D(3, 3, 1, 2, "valid"), MaxPool2D(2, 2), Flatten(), Dense(2 * 2 * 2, 3)), (1, 6, 6)),
])
def test_grad_check_small_stacks(stack, shape, rng):
    params = init_params(stack, 5)
    x = rng.normal(size=(3, *shape))
    y = rng.integers(0, 2, size=3)
    assert core.grad_check(stack, params, x, y) < 1e-4


def test_grad_check_linear_stack_tight(rng):
    stack = (Dense(3, 2),)
    params = init_params(stack, 1)
    assert core.grad_check(stack, params, rng.normal(size=(4, 3)), rng.integers(0, 2, 4)) < 1e-6


def test_grad_check_all_zero():
    stack = (Dense(3, 2, False),)
    params = [[np.zeros((3, 2))]]
    err = core.grad_check(stack, params, np.zeros((2, 3)), np.array([0, 1]))
    assert err == 0.0


def test_predict_chunks_match_full_forward(rng):
    stack = (Dense(4, 3),)
    params = init_params(stack, 2)
    x = rng.normal(size=(11, 4))
    np.testing.assert_allclose(core.predict(stack, params, x, batch_size=3), core.forward(stack, params, x)[1])


def test_lr_schedule():
    s = LrSchedule(0.1, 0.5, 2)
    assert [s(t) for t in range(5)] == [0.1, 0.1, 0.05, 0.05, 0.025]
    assert LrSchedule(1.0, mode="diminishing")(3) == 0.25
