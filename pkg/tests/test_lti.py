import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpsattack.errors import DivergedResponse, InvalidSample, InvalidTransferFunction, ZeroReference
from cpsattack.lti import (
    DC_MOTOR_SURROGATE,
    UNDERDAMPED_SURROGATE,
    SimState,
    TransferFunction,
    closed_loop_response,
    make_pi_controller,
    simulate,
    simulate_stepwise,
    step_metrics,
    tf_step,
)

import oracles


def test_pure_gain():
    assert tf_step(SimState(TransferFunction([2.0])), 1.0) == 2.0


def test_unit_delay():
    np.testing.assert_array_equal(simulate(TransferFunction([1.0], [0.0]), [1, 0, 0]), [0, 1, 0])


def test_first_order_step():
    y = simulate(TransferFunction([0.5], [-0.5]), np.ones(30))
    np.testing.assert_allclose(y[:4], [0, 0.5, 0.75, 0.875])
    assert abs(y[-1] - 1.0) < 1e-8
    ref = [0.0]
    for _ in range(29):
        ref.append(0.5 * ref[-1] + 0.5)
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-15)


@pytest.mark.parametrize(
    "num,den",
    [([1, 2, 3], [0.5]), ([1.0], [float("nan")]), ([], [])],
)
def test_invalid_transfer_functions(num, den):
    with pytest.raises(InvalidTransferFunction):
        TransferFunction(num, den)


def test_bad_sample_period():
    with pytest.raises(InvalidTransferFunction):
        TransferFunction([1.0], [], 0.0)


def test_non_finite_input():
    with pytest.raises(InvalidSample):
        SimState(DC_MOTOR_SURROGATE).step(float("inf"))


def test_coefficient_round_trip():
    tf = TransferFunction([0.1, 0.05], [-1.3, 0.5])
    again = TransferFunction.from_coefficients(tf.coefficients, 1, 2)
    assert again == tf


def test_gain_schedule_keeps_memory():
    st_ = SimState(make_pi_controller(1.0, 10.0, 0.1))
    st_.step(1.0)
    st_.tf = make_pi_controller(2.0, 10.0, 0.1)
    with pytest.raises(InvalidTransferFunction):
        st_.tf = TransferFunction([1.0])


class TestPI:
    def test_proportional_only(self):
        c = make_pi_controller(1.0, 0.0, 0.01)
        np.testing.assert_allclose(simulate(c, [1, -2, 3, 0.5]), [1, -2, 3, 0.5], atol=1e-12)

    def test_pure_integrator(self):
        c = make_pi_controller(0.0, 100.0, 0.01)
        np.testing.assert_allclose(c.num, [1.0, 0.0])
        np.testing.assert_allclose(c.den, [-1.0])
        np.testing.assert_allclose(simulate(c, np.ones(5)), [1, 2, 3, 4, 5])

    def test_step_kick_and_slope(self):
        c = make_pi_controller(2.0, 50.0, 0.02)
        np.testing.assert_allclose(simulate(c, np.ones(6)), [3, 4, 5, 6, 7, 8], atol=1e-12)


class TestClosedLoop:
    def test_zero_controller(self):
        y = closed_loop_response(TransferFunction([0.0]), TransferFunction([1.0]), 1.0, 10)
        np.testing.assert_array_equal(y, np.zeros(10))

    def test_unit_loop_alternates(self):
        y = closed_loop_response(TransferFunction([1.0]), TransferFunction([1.0]), 1.0, 6)
        np.testing.assert_array_equal(y, [0, 1, 0, 1, 0, 1])

    def test_dc_surrogate_against_oracle(self):
        c = make_pi_controller(4.0, 40.0, 0.01)
        y = closed_loop_response(c, DC_MOTOR_SURROGATE, 1.0, 200)
        _, _, y_ref = oracles.closed_loop(c.num, c.den, DC_MOTOR_SURROGATE.num, DC_MOTOR_SURROGATE.den, 1.0, 200)
        np.testing.assert_allclose(y, y_ref, rtol=0, atol=1e-12)
        m = step_metrics(y, 1.0)
        assert m.overshoot_pct == pytest.approx(oracles.overshoot_pct(y_ref, 1.0), abs=1e-9)
        assert m.settling_time == oracles.settling_index(y_ref, 1.0)
        assert m.overshoot_pct == pytest.approx(13.963, abs=1e-3)
        assert m.settling_time == 11

    def test_divergence_carries_partial(self):
        with pytest.raises(DivergedResponse) as info:
            closed_loop_response(TransferFunction([5.0]), TransferFunction([1.0], [-1.0]), 1.0, 500, bound=1e6)
        assert info.value.partial is not None
        assert len(info.value.partial) == info.value.step + 1


class TestStepMetrics:
    def test_constant_at_reference(self):
        m = step_metrics(np.full(50, 2.0), 2.0)
        assert (m.overshoot_pct, m.settling_time, m.steady_state_error) == (0.0, 0, 0.0)

    def test_monotone_has_no_overshoot(self):
        y = simulate(TransferFunction([0.5], [-0.5]), np.ones(40))
        assert step_metrics(y, 1.0).overshoot_pct == 0.0

    def test_underdamped_overshoot(self):
        c = make_pi_controller(0.05, 2.0, 0.01)
        _, _, y = oracles.closed_loop(c.num, c.den, UNDERDAMPED_SURROGATE.num, UNDERDAMPED_SURROGATE.den, 1.0, 400)
        m = step_metrics(y, 1.0)
        assert m.overshoot_pct == pytest.approx(oracles.overshoot_pct(y, 1.0), abs=1e-9)
        assert m.overshoot_pct > 5.0

    def test_not_settled(self):
        y = np.ones(20)
        y[-1] = 1.5
        assert step_metrics(y, 1.0).settling_time is None

    def test_negative_reference(self):
        assert step_metrics([-1.2, -1.0, -1.0], -1.0).overshoot_pct == pytest.approx(20.0)

    def test_zero_reference(self):
        with pytest.raises(ZeroReference):
            step_metrics([0.0, 0.1], 0.0)


# -- properties --------------------------------------------------------------

coef = st.floats(-2.0, 2.0, allow_nan=False)
signal_st = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=40)


@st.composite
def stable_tfs(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    num, den = oracles.random_stable_tf(np.random.default_rng(seed))
    return TransferFunction(num, den)


@settings(max_examples=60, deadline=None)
@given(stable_tfs(), signal_st, signal_st, coef, coef)
def test_linearity_and_superposition(tf, u1, u2, alpha, beta):
    n = min(len(u1), len(u2))
    u1, u2 = np.array(u1[:n]), np.array(u2[:n])
    lhs = simulate(tf, alpha * u1 + beta * u2)
    rhs = alpha * simulate(tf, u1) + beta * simulate(tf, u2)
    scale = 1.0 + np.max(np.abs(rhs))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


@settings(max_examples=60, deadline=None)
@given(stable_tfs(), signal_st, st.integers(1, 10))
def test_time_invariance(tf, u, shift):
    u = np.array(u)
    y = simulate(tf, u)
    y_shift = simulate(tf, np.concatenate([np.zeros(shift), u]))
    np.testing.assert_allclose(y_shift[shift:], y, rtol=0, atol=1e-9 * (1 + np.max(np.abs(y))))
    assert np.all(y_shift[:shift] == 0)


@settings(max_examples=40, deadline=None)
@given(stable_tfs(), signal_st)
def test_deterministic_and_stepwise_agrees(tf, u):
    a, b = simulate(tf, u), simulate(tf, u)
    np.testing.assert_array_equal(a, b)
    c = simulate_stepwise(tf, u)
    np.testing.assert_allclose(a, c, rtol=0, atol=1e-10 * (1 + np.max(np.abs(c))))


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100, allow_nan=False), signal_st)
def test_gain_block(g, u):
    np.testing.assert_array_equal(simulate(TransferFunction([g]), u), g * np.asarray(u))


def test_dc_gain_matches_final_value():
    tf = DC_MOTOR_SURROGATE
    y = simulate(tf, np.ones(400))
    assert y[-1] == pytest.approx(tf.dc_gain(), rel=1e-9)
    assert math.isclose(tf.dc_gain(), 1.0)
