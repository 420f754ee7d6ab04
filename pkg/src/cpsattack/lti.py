"""Discrete-time LTI transfer functions.

A transfer function is stored the way the identification attacks search
over it::

            a_n z^n + ... + a_1 z + a_0
    Q(z) = -------------------------------
            z^m + b_{m-1} z^{m-1} + ... + b_0

``num`` holds ``[a_n, ..., a_0]`` and ``den`` holds ``[b_{m-1}, ..., b_0]``;
the leading ``z^m`` of the denominator is implicit.  Simulation runs the
difference equation obtained by multiplying through by ``z^-m`` with zero
initial conditions.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import signal

from .errors import DivergedResponse, InvalidSample, InvalidTransferFunction, ZeroReference

__all__ = [
    "TransferFunction",
    "SimState",
    "StepMetrics",
    "tf_step",
    "simulate",
    "simulate_stepwise",
    "make_pi_controller",
    "closed_loop_response",
    "step_metrics",
    "DIVERGENCE_BOUND",
    "DC_MOTOR_SURROGATE",
    "UNDERDAMPED_SURROGATE",
]

DIVERGENCE_BOUND = 1e9


@dataclass(frozen=True)
class TransferFunction:
    num: tuple
    den: tuple = ()
    sample_period: float = 1.0

    def __post_init__(self):
        num = tuple(float(c) for c in np.atleast_1d(np.asarray(self.num, dtype=float)))
        den = tuple(float(c) for c in np.asarray(self.den, dtype=float).ravel())
        if len(num) == 0:
            raise InvalidTransferFunction("numerator must have at least one coefficient")
        if not all(math.isfinite(c) for c in num + den):
            raise InvalidTransferFunction("coefficients must be finite")
        if not (self.sample_period > 0 and math.isfinite(self.sample_period)):
            raise InvalidTransferFunction(f"sample_period must be > 0, got {self.sample_period}")
        if len(den) < len(num) - 1:
            raise InvalidTransferFunction(
                f"improper transfer function: numerator degree {len(num) - 1} "
                f"exceeds denominator degree {len(den)}"
            )
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)
        object.__setattr__(self, "sample_period", float(self.sample_period))

    @property
    def n(self) -> int:
        """Numerator degree."""
        return len(self.num) - 1

    @property
    def m(self) -> int:
        """Denominator degree."""
        return len(self.den)

    @property
    def orders(self) -> tuple:
        return (self.n, self.m)

    @classmethod
    def gain(cls, g: float, sample_period: float = 1.0) -> "TransferFunction":
        return cls((g,), (), sample_period)

    @classmethod
    def from_coefficients(cls, coeffs, n: int, m: int, sample_period: float = 1.0):
        """Build from a flat ``[a_n..a_0, b_{m-1}..b_0]`` vector (optimizer layout)."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.size != n + 1 + m:
            raise InvalidTransferFunction(f"expected {n + 1 + m} coefficients, got {coeffs.size}")
        return cls(coeffs[: n + 1], coeffs[n + 1 :], sample_period)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array(self.num + self.den)

    def filter_coefficients(self):
        """``(b, a)`` in powers of ``z^-1`` as used by :func:`scipy.signal.lfilter`."""
        b = np.concatenate([np.zeros(self.m - self.n), self.num])
        a = np.concatenate([[1.0], self.den])
        return b, a

    def dc_gain(self) -> float:
        return sum(self.num) / (1.0 + sum(self.den))

    def poles(self) -> np.ndarray:
        return np.roots((1.0,) + self.den) if self.m else np.array([])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def to_dict(self) -> dict:
        return {"num": list(self.num), "den": list(self.den), "sample_period": self.sample_period}


class SimState:
    """Mutable simulation state of one transfer function.

    Histories hold the last ``m`` inputs and outputs, most recent first.
    The transfer function may be swapped for another of identical orders
    (gain scheduling) without resetting the histories.
    """

    def __init__(self, tf: TransferFunction):
        self.k = 0
        self.input_history = deque([0.0] * tf.m, maxlen=tf.m)
        self.output_history = deque([0.0] * tf.m, maxlen=tf.m)
        self.tf = tf

    @property
    def tf(self) -> TransferFunction:
        return self._tf

    @tf.setter
    def tf(self, tf: TransferFunction):
        if hasattr(self, "_tf") and tf.orders != self._tf.orders:
            raise InvalidTransferFunction(
                f"cannot swap orders {self._tf.orders} for {tf.orders} mid-run"
            )
        self._tf = tf
        b, a = tf.filter_coefficients()
        self._b = [float(c) for c in b]
        self._a = [float(c) for c in a]

    def step(self, u: float) -> float:
        if not math.isfinite(u):
            raise InvalidSample(f"non-finite input {u!r} at step {self.k}")
        b, a = self._b, self._a
        acc = b[0] * u
        for d, x in enumerate(self.input_history, start=1):
            acc += b[d] * x
        for d, y in enumerate(self.output_history, start=1):
            acc -= a[d] * y
        if self.tf.m:
            self.input_history.appendleft(u)
            self.output_history.appendleft(acc)
        self.k += 1
        return acc

    def copy(self) -> "SimState":
        other = SimState.__new__(SimState)
        other.k = self.k
        other.input_history = deque(self.input_history, maxlen=self.input_history.maxlen)
        other.output_history = deque(self.output_history, maxlen=self.output_history.maxlen)
        other._tf, other._b, other._a = self._tf, self._b, self._a
        return other


def tf_step(state: SimState, u: float) -> float:
    """Advance ``state`` by one sample and return the output ``o(k)``."""
    return state.step(u)


def simulate(tf: TransferFunction, inputs) -> np.ndarray:
    """Zero-state response of ``tf`` to a whole input sequence.

    Vectorised through ``lfilter``; agrees with repeated :func:`tf_step`
    to rounding.  Unstable candidates may overflow to inf/nan, which
    callers scoring fitness treat as invalid.
    """
    b, a = tf.filter_coefficients()
    with np.errstate(all="ignore"):
        return signal.lfilter(b, a, np.asarray(inputs, dtype=float))


def simulate_stepwise(tf: TransferFunction, inputs) -> np.ndarray:
    """Zero-state response computed with :class:`SimState`.

    Bit-for-bit identical to the plant inside a simulated loop fed the same
    inputs, which :func:`simulate` does not guarantee.
    """
    state = SimState(tf)
    return np.array([state.step(float(u)) for u in inputs], dtype=float)


def make_pi_controller(kp: float, ki: float, sample_period: float) -> TransferFunction:
    """Backward-Euler PI controller ``[(kp + ki T) z - kp] / (z - 1)``."""
    if not sample_period > 0:
        raise InvalidTransferFunction(f"sample_period must be > 0, got {sample_period}")
    return TransferFunction((kp + ki * sample_period, -kp), (-1.0,), sample_period)


def _reference_array(reference, horizon: int) -> np.ndarray:
    if np.ndim(reference) == 0:
        return np.full(horizon, float(reference))
    ref = np.asarray(reference, dtype=float)
    if ref.size < horizon:
        raise ValueError(f"reference has {ref.size} samples, horizon needs {horizon}")
    return ref[:horizon]


def closed_loop_response(
    controller: TransferFunction,
    plant: TransferFunction,
    reference,
    horizon: int,
    bound: float = DIVERGENCE_BOUND,
) -> np.ndarray:
    """Plant output of a unity negative-feedback loop.

    The forward path carries one sample of transport delay: the control
    computed at step ``k`` reaches the plant at ``k + 1`` and the plant
    input is 0 at ``k = 0``.  The feedback path is instantaneous.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    ref = _reference_array(reference, horizon)
    ctrl, proc = SimState(controller), SimState(plant)
    out = np.empty(horizon)
    u_pending = 0.0
    for k in range(horizon):
        y = proc.step(u_pending)
        out[k] = y
        if not abs(y) <= bound:
            raise DivergedResponse(f"|y| exceeded {bound:g} at step {k}", partial=out[: k + 1].copy(), step=k)
        u_pending = ctrl.step(ref[k] - y)
    return out


@dataclass
class StepMetrics:
    overshoot_pct: float
    settling_time: Optional[int]
    steady_state_error: float

    @property
    def settled(self) -> bool:
        return self.settling_time is not None

    def to_dict(self) -> dict:
        return {
            "overshoot_pct": self.overshoot_pct,
            "settling_time": self.settling_time,
            "steady_state_error": self.steady_state_error,
        }


def step_metrics(output, reference: float, settle_band_pct: float = 2.0) -> StepMetrics:
    """Overshoot, settling time and steady-state error of a step response.

    Overshoot is measured in the direction of the reference, so a negative
    step overshoots when the output goes below it.  Steady-state error is
    taken against the mean of the last 5% of samples (at least one).
    ``settling_time`` is ``None`` when the final sample is outside the band.
    """
    y = np.asarray(output, dtype=float)
    if y.size == 0:
        raise ValueError("output must be non-empty")
    if reference == 0:
        raise ZeroReference("percentage metrics need a non-zero reference")
    sign = 1.0 if reference > 0 else -1.0
    peak = float(np.max(sign * y))
    overshoot = max(0.0, (peak - abs(reference)) / abs(reference) * 100.0)

    tail = max(1, math.ceil(0.05 * y.size))
    sse = float(reference - np.mean(y[-tail:]))

    band = settle_band_pct / 100.0 * abs(reference)
    outside = np.flatnonzero(np.abs(y - reference) > band)
    if outside.size == 0:
        settling = 0
    elif outside[-1] == y.size - 1:
        settling = None
    else:
        settling = int(outside[-1]) + 1
    return StepMetrics(overshoot, settling, sse)


# Stand-in plants; not the motor of any published experiment.
DC_MOTOR_SURROGATE = TransferFunction((0.095,), (-0.905,), 0.01)
UNDERDAMPED_SURROGATE = TransferFunction((1.0, 0.0), (-1.5, 0.6), 0.01)
