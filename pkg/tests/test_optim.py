import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cgm.mlp import MlpSpec, init_params
from cgm.optim import AdamState, adam_step, cosine_lr


def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == 0.0
    assert abs(cosine_lr(50, 100, 1e-3) - 5e-4) < 1e-18


@given(st.integers(1, 10_000), st.data())
def test_cosine_schedule_is_monotone(total, data):
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    assert cosine_lr(b, total, 1.0) <= cosine_lr(a, total, 1.0)


@pytest.mark.parametrize("step,total", [(-1, 10), (11, 10), (0, 0)])
def test_cosine_schedule_rejects_out_of_range(step, total):
    with pytest.raises(ValueError):
        cosine_lr(step, total, 1.0)


def _params():
    return init_params(MlpSpec(1, (4,), 2), 0)


def test_zero_gradient_leaves_everything_unchanged():
    params = _params()
    state, new = adam_step(AdamState.zeros(params), params, params.zeros_like(), 1e-3)
    np.testing.assert_array_equal(new.values, params.values)
    np.testing.assert_array_equal(state.m, 0.0)
    np.testing.assert_array_equal(state.v, 0.0)
    assert state.step == 1


def test_first_step_moves_each_coordinate_by_the_learning_rate():
    params = _params()
    g = params.with_values(np.random.default_rng(1).standard_normal(len(params)))
    _, new = adam_step(AdamState.zeros(params), params, g, 1e-3)
    delta = new.values - params.values
    expected = -1e-3 * np.sign(g.values)
    # |g| / (|g| + eps) differs from 1 by at most eps / |g|; forming new - old
    # adds rounding of the order of one ulp of the parameter
    slack = 1e-3 * 1e-8 / np.abs(g.values) + 4 * np.spacing(np.abs(params.values) + 1e-3)
    assert np.all(np.abs(delta - expected) <= slack)


def test_first_step_is_scale_invariant():
    params = _params()
    g = params.with_values(np.random.default_rng(2).standard_normal(len(params)))
    _, a = adam_step(AdamState.zeros(params), params, g, 1e-3)
    _, b = adam_step(AdamState.zeros(params), params, g.with_values(10 * g.values), 1e-3)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-3 * 1e-7)


def test_moments_follow_exponential_averages():
    params = _params()
    rng = np.random.default_rng(3)
    grads = [params.with_values(rng.standard_normal(len(params))) for _ in range(3)]
    state = AdamState.zeros(params)
    p = params
    for g in grads:
        state, p = adam_step(state, p, g, 1e-3)
    m = sum(0.1 * 0.9 ** (2 - i) * g.values for i, g in enumerate(grads))
    v = sum(0.001 * 0.999 ** (2 - i) * g.values ** 2 for i, g in enumerate(grads))
    np.testing.assert_allclose(state.m, m, rtol=1e-13)
    np.testing.assert_allclose(state.v, v, rtol=1e-13)
    assert state.step == 3


def test_layout_mismatch_is_rejected():
    params = _params()
    other = init_params(MlpSpec(1, (5,), 2), 0)
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(params), params, other, 1e-3)
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(other), params, params.zeros_like(), 1e-3)


def test_adam_minimises_a_quadratic():
    params = _params().with_values(np.linspace(-1, 1, len(_params())))
    state = AdamState.zeros(params)
    for step in range(2000):
        grad = params.with_values(2 * (params.values - 0.5))
        state, params = adam_step(state, params, grad, cosine_lr(step, 2000, 0.05))
    assert math.isclose(float(np.max(np.abs(params.values - 0.5))), 0.0, abs_tol=1e-3)
