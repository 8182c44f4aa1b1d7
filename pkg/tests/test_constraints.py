import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cgm.constraints import ConstraintSpec, coordinate_indicator, evaluate_batch


def test_indicator_above_threshold():
    np.testing.assert_array_equal(coordinate_indicator([0.7], [0.0]), [1.0])


def test_indicator_is_strict_at_the_boundary():
    np.testing.assert_array_equal(coordinate_indicator([0.0], [0.0]), [0.0])


def test_indicator_per_coordinate_thresholds():
    np.testing.assert_array_equal(coordinate_indicator([-1.0, 2.0, 0.5], [0.0, 0.0, 1.0]),
                                  [0.0, 1.0, 0.0])


def test_indicator_length_mismatch():
    with pytest.raises(ValueError):
        coordinate_indicator([1.0, 2.0], [0.0])


def test_empty_batch_gives_empty_matrix():
    spec = ConstraintSpec(target=[0.8, 0.8])
    out = evaluate_batch(spec, np.empty((0, 2)))
    assert out.shape == (0, 2)


def test_all_states_above_thresholds_give_ones():
    spec = ConstraintSpec(target=[0.5, 0.5, 0.5], thresholds=[0.0, 1.0, -2.0])
    states = np.array([[0.1, 1.5, -1.0], [3.0, 2.0, 0.0]])
    np.testing.assert_array_equal(evaluate_batch(spec, states), np.ones((2, 3)))


@given(arrays(np.float64, st.tuples(st.integers(0, 8), st.just(3)),
              elements=st.floats(-5, 5, allow_nan=False)),
       arrays(np.float64, 3, elements=st.floats(-2, 2, allow_nan=False)))
def test_batch_equals_rowwise_indicator(states, thresholds):
    spec = ConstraintSpec(target=[0.5] * 3, thresholds=thresholds)
    out = evaluate_batch(spec, states)
    assert out.shape == states.shape
    for row, x in zip(out, states):
        np.testing.assert_array_equal(row, coordinate_indicator(x, thresholds))


def test_custom_statistic_shape_is_checked():
    spec = ConstraintSpec(target=[1.0, 2.0], kind="custom",
                          statistic=lambda x: np.stack([x[:, 0], x[:, 0] ** 2], axis=1))
    out = evaluate_batch(spec, np.array([[2.0], [-1.0]]))
    np.testing.assert_array_equal(out, [[2.0, 4.0], [-1.0, 1.0]])
    bad = ConstraintSpec(target=[1.0], kind="custom", statistic=lambda x: np.ones((len(x), 2)))
    with pytest.raises(ValueError):
        evaluate_batch(bad, np.zeros((3, 1)))


@pytest.mark.parametrize("target", [0.0, 1.0, 1.5])
def test_indicator_targets_must_be_inside_unit_interval(target):
    with pytest.raises(ValueError):
        ConstraintSpec(target=[target])


def test_states_must_be_a_matrix():
    with pytest.raises(ValueError):
        evaluate_batch(ConstraintSpec(target=[0.5]), np.zeros(3))
