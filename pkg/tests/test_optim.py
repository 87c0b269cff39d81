import numpy as np
import pytest
from hypothesis import given, strategies as st

from reprise.optim import AdamState, Schedule, adam_step, clamp_range, lr_at


def test_first_adam_step_by_hand():
    theta, state = adam_step(np.array([0.0]), np.array([1.0]), AdamState.fresh(1), 0.001)
    # m_hat = v_hat = 1 on the first step, so the update is lr / (1 + eps).
    assert theta[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert state.step_count == 1


def test_second_step_by_hand():
    s = AdamState.fresh(1)
    x, s = adam_step(np.array([0.0]), np.array([1.0]), s, 0.1)
    x, s = adam_step(x, np.array([-2.0]), s, 0.1)
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    expect = -0.1 / (1 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert x[0] == pytest.approx(expect, rel=1e-12)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.integers(0, 50))
def test_zero_gradient_leaves_values(values, steps):
    v = np.array(values)
    state = AdamState(np.zeros_like(v), np.zeros_like(v), steps)
    out, new = adam_step(v, np.zeros_like(v), state, 0.01)
    np.testing.assert_array_equal(out, v)
    assert new.step_count == steps + 1


def test_adam_is_deterministic_and_pure():
    v, g = np.array([0.3, -0.2]), np.array([0.5, 0.1])
    s = AdamState.fresh(2)
    a = adam_step(v, g, s, 0.01)
    b = adam_step(v, g, s, 0.01)
    np.testing.assert_array_equal(a[0], b[0])
    assert s.step_count == 0 and not np.any(s.first_moment)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.fresh(2), 0.1)
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(2), AdamState.fresh(3), 0.1)


def test_paper_schedule():
    s = Schedule.paper()
    assert lr_at(s, 0) == 1e-3
    assert lr_at(s, 999) == 1e-3
    assert lr_at(s, 1500) == 1e-4
    assert lr_at(s, 2999) == 1e-5


def test_desk_schedule_thresholds():
    s = Schedule.desk()
    assert [e for e, _ in s.steps] == [0, 100, 200]
    rates = [lr for _, lr in s.steps]
    assert rates == sorted(rates, reverse=True)


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(((0, 1e-3), (10, 1e-4), (10, 1e-5)))
    with pytest.raises(ValueError):
        Schedule(((5, 1e-3),))
    with pytest.raises(ValueError):
        lr_at(Schedule.paper(), -1)
    assert Schedule(tuple(map(tuple, Schedule.paper().to_list()))) == Schedule.paper()


def test_clamp_examples():
    np.testing.assert_array_equal(clamp_range([-0.2, 0.5, 1.3], 0, 1), [0, 0.5, 1])
    np.testing.assert_array_equal(clamp_range([0.1, 0.9], 0, 1), [0.1, 0.9])
    with pytest.raises(ValueError):
        clamp_range([0.0], 1, 0)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_clamp_idempotent_and_bounded(values):
    once = clamp_range(values, -1, 1)
    assert np.all((once >= -1) & (once <= 1))
    np.testing.assert_array_equal(clamp_range(once, -1, 1), once)
