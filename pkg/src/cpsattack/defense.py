"""Baseline defenses: a model-based residual monitor and switching PI gains."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AlignmentError, SchemaError
from .lti import TransferFunction, make_pi_controller, simulate_stepwise
from .netloop import LoopTrace, NOMINAL_DELAY, Stream, run_loop

__all__ = [
    "AlarmLog",
    "SwitchSchedule",
    "residual_monitor",
    "expected_feedback",
    "feedback_residual",
    "apply_switching_defense",
    "check_schedule",
]


@dataclass(frozen=True)
class AlarmLog:
    events: tuple
    threshold: float

    @property
    def tripped(self) -> bool:
        return bool(self.events)

    @property
    def first_alarm(self) -> Optional[int]:
        return self.events[0][0] if self.events else None

    def summary(self) -> dict:
        return {
            "threshold": self.threshold,
            "tripped": self.tripped,
            "alarms": len(self.events),
            "first_alarm": self.first_alarm,
        }


def residual_monitor(expected, observed, threshold: float) -> AlarmLog:
    """Flag every step where ``|observed - expected|`` exceeds ``threshold``."""
    expected = np.asarray(expected, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if expected.shape != observed.shape:
        raise AlignmentError(f"expected has {expected.size} samples, observed has {observed.size}")
    residual = observed - expected
    hits = np.flatnonzero(np.abs(residual) > threshold)
    return AlarmLog(tuple((int(k), float(residual[k])) for k in hits), float(threshold))


def expected_feedback(plant_model: TransferFunction, trace: LoopTrace) -> np.ndarray:
    """Measurements the controller expects given what it sent.

    The controller's copy of the nominal plant is driven by its own control
    samples, shifted by the forward transport delay.
    """
    d = NOMINAL_DELAY[Stream.FORWARD]
    u = np.concatenate([np.zeros(d), trace.control_sent])[: len(trace)]
    return simulate_stepwise(plant_model, u)


def feedback_residual(plant_model: TransferFunction, trace: LoopTrace) -> np.ndarray:
    return trace.feedback_delivered - expected_feedback(plant_model, trace)


@dataclass(frozen=True)
class SwitchSchedule:
    """Periodic rotation through PI gain sets ``[(kp, ki), ...]``."""

    gain_sets: tuple
    period: int

    def __post_init__(self):
        sets = tuple((float(kp), float(ki)) for kp, ki in self.gain_sets)
        if len(sets) < 2:
            raise SchemaError(f"a switching schedule needs at least 2 gain sets, got {len(sets)}")
        if int(self.period) < 1:
            raise SchemaError(f"switching period must be >= 1, got {self.period}")
        object.__setattr__(self, "gain_sets", sets)
        object.__setattr__(self, "period", int(self.period))

    def index_at(self, k: int) -> int:
        return (k // self.period) % len(self.gain_sets)

    def controllers(self, sample_period: float) -> list:
        return [make_pi_controller(kp, ki, sample_period) for kp, ki in self.gain_sets]

    def as_schedule(self, sample_period: float):
        """Callable ``k -> controller`` for :func:`cpsattack.netloop.run_loop`."""
        tfs = self.controllers(sample_period)
        return lambda k: tfs[self.index_at(k)]

    def to_dict(self) -> dict:
        return {"gain_sets": [list(g) for g in self.gain_sets], "period": self.period}


def check_schedule(schedule: SwitchSchedule, plant: TransferFunction, reference, horizon: int) -> None:
    """Reject schedules that are not safe on the nominal plant.

    Each gain set must give a stable static loop, and the switched loop
    must keep the output within ten times the reference magnitude.
    """
    cl_bound = 10.0 * float(np.max(np.abs(np.atleast_1d(reference)[:horizon])) or 1.0)
    for kp, ki in schedule.gain_sets:
        trace = run_loop(make_pi_controller(kp, ki, plant.sample_period), plant, reference, horizon, log_packets=False)
        if trace.diverged or np.max(np.abs(trace.plant_output)) > cl_bound:
            raise SchemaError(f"gain set (kp={kp}, ki={ki}) is not stable on the nominal plant")
    trace = run_loop(
        make_pi_controller(*schedule.gain_sets[0], plant.sample_period), plant, reference, horizon,
        controller_schedule=schedule.as_schedule(plant.sample_period), log_packets=False,
    )
    if trace.diverged or np.max(np.abs(trace.plant_output)) > cl_bound:
        raise SchemaError("switched loop leaves 10x the reference on the nominal plant")


def apply_switching_defense(schedule: SwitchSchedule, scenario):
    """Return a copy of ``scenario`` whose controller rotates through ``schedule``."""
    check_schedule(schedule, scenario.plant, scenario.reference_series(), scenario.horizon)
    return dataclasses.replace(scenario, defense=schedule)
