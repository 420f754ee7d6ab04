import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpsattack.cpi import LearnedModel, psi_identify
from cpsattack.defense import (
    SwitchSchedule,
    apply_switching_defense,
    check_schedule,
    expected_feedback,
    feedback_residual,
    residual_monitor,
)
from cpsattack.errors import AlignmentError, SchemaError
from cpsattack.lti import DC_MOTOR_SURROGATE, make_pi_controller
from cpsattack.modelbased import CovertMitm, InjectionFunction, InjectionMitm
from cpsattack.netloop import Stream, eavesdrop, run_loop
from cpsattack.optimizers import OptimizerConfig
from cpsattack.scenario import ReferenceSpec, ScenarioConfig

PI = make_pi_controller(4.0, 40.0, 0.01)


class TestMonitor:
    def test_equal_series(self):
        log = residual_monitor(np.ones(10), np.ones(10), 1e-9)
        assert not log.tripped and log.first_alarm is None

    def test_alignment(self):
        with pytest.raises(AlignmentError):
            residual_monitor(np.ones(10), np.ones(9), 0.1)

    def test_events(self):
        log = residual_monitor([0, 0, 0, 0], [0, 0.5, 0, -0.7], 0.1)
        assert log.events == ((1, 0.5), (3, -0.7))
        assert log.summary()["alarms"] == 2

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=30),
        st.floats(0.01, 5),
        st.floats(0.1, 10),
    )
    def test_scaling_invariance(self, pairs, thr, c):
        e, o = np.array(pairs).T
        a = residual_monitor(e, o, thr)
        b = residual_monitor(c * e, c * o, c * thr)
        # scaling can move samples sitting exactly on the threshold by one ulp
        near = np.isclose(np.abs(o - e), thr, rtol=1e-9)
        ka = {k for k, _ in a.events if not near[k]}
        kb = {k for k, _ in b.events if not near[k]}
        assert ka == kb

    def test_clean_loop_has_zero_residual(self):
        trace = run_loop(PI, DC_MOTOR_SURROGATE, 1.0, 200)
        assert np.all(feedback_residual(DC_MOTOR_SURROGATE, trace) == 0.0)

    def test_covert_exact_is_silent(self):
        mitm = CovertMitm(LearnedModel(DC_MOTOR_SURROGATE, 0.0), lambda k: 0.1)
        trace = run_loop(PI, DC_MOTOR_SURROGATE, 1.0, 300, mitm=mitm)
        assert not residual_monitor(expected_feedback(DC_MOTOR_SURROGATE, trace), trace.feedback_delivered, 1e-6).tripped

    def test_naive_injection_is_caught(self):
        onset = 100
        inj = InjectionFunction(1.0, 0.1, start=onset, stream=Stream.FORWARD)
        trace = run_loop(PI, DC_MOTOR_SURROGATE, 1.0, 300, mitm=InjectionMitm(inj))
        log = residual_monitor(expected_feedback(DC_MOTOR_SURROGATE, trace), trace.feedback_delivered, 0.01)
        assert log.tripped
        assert onset <= log.first_alarm <= onset + 5


class TestSwitching:
    def test_needs_two_sets(self):
        with pytest.raises(SchemaError):
            SwitchSchedule(((4.0, 40.0),), 10)

    def test_long_period_is_static(self):
        sched = SwitchSchedule(((4.0, 40.0), (2.0, 20.0)), 500)
        a = run_loop(PI, DC_MOTOR_SURROGATE, 1.0, 200)
        b = run_loop(PI, DC_MOTOR_SURROGATE, 1.0, 200, controller_schedule=sched.as_schedule(0.01))
        np.testing.assert_array_equal(a.plant_output, b.plant_output)

    def test_index_rotation(self):
        sched = SwitchSchedule(((1, 1), (2, 2), (3, 3)), 4)
        assert [sched.index_at(k) for k in range(0, 16, 2)] == [0, 0, 1, 1, 2, 2, 0, 0]

    def test_unstable_gain_rejected(self):
        sched = SwitchSchedule(((4.0, 40.0), (60.0, 0.0)), 25)
        with pytest.raises(SchemaError):
            check_schedule(sched, DC_MOTOR_SURROGATE, 1.0, 100)

    def test_apply_to_scenario(self):
        cfg = ScenarioConfig(DC_MOTOR_SURROGATE, PI, ReferenceSpec("step", 1.0), 100)
        sched = SwitchSchedule(((4.0, 40.0), (2.0, 20.0)), 25)
        assert apply_switching_defense(sched, cfg).defense == sched

    def test_switching_spoils_controller_fit(self):
        horizon = 200
        ref = np.where((np.arange(horizon) % 50) < 25, 1.0, 0.0)
        sched = SwitchSchedule(((4.0, 40.0), (2.0, 20.0)), horizon // 4)
        cfg = OptimizerConfig(30, 600, seed=0)
        static = run_loop(PI, DC_MOTOR_SURROGATE, ref, horizon)
        switched = run_loop(PI, DC_MOTOR_SURROGATE, ref, horizon, controller_schedule=sched.as_schedule(0.01))
        fits = [psi_identify(*eavesdrop(t, Stream.FEEDBACK), 1, 1, config=cfg).fit_error for t in (static, switched)]
        assert fits[1] >= 10 * fits[0]
