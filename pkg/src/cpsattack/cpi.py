"""Cyber-physical intelligence: learning loop models from traffic.

Passive identification fits a transfer function of caller-chosen orders to
an eavesdropped input/output pair.  Active identification superimposes a
probe on one stream, compares the loop against an unprobed replica, and
fits the plant to the resulting deviations.  Both search the flat
coefficient vector ``[a_n..a_0, b_{m-1}..b_0]`` with BSA or PSO, scoring
candidates by output RMS error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .errors import InjectionDenied, InvalidWindow, MixedOrders, OrderMismatch, PoorExcitation
from .lti import TransferFunction
from .netloop import LoopTrace, MitmHandler, Stream, run_loop
from .optimizers import OptimizerConfig, minimize

__all__ = [
    "LearnedModel",
    "AttackSignal",
    "LoopHandle",
    "OutputErrorFitness",
    "ProbeInjector",
    "excitation_score",
    "psi_identify",
    "asi_identify",
    "refine",
    "denoise",
    "impulse_probe",
    "DEFAULT_IDENTIFICATION_CONFIG",
    "DEFAULT_COEFFICIENT_BOUND",
    "DEFAULT_EXCITATION_THRESHOLD",
]

DEFAULT_IDENTIFICATION_CONFIG = OptimizerConfig(population_size=30, max_iterations=2000)
DEFAULT_COEFFICIENT_BOUND = 10.0
DEFAULT_EXCITATION_THRESHOLD = 1e-6

# Capability names are plain strings here to keep this module independent
# of the attack taxonomy.
_ASI_CAPABILITIES = frozenset({"LoopAccess", "DataAccess"})


@dataclass
class LearnedModel:
    tf: TransferFunction
    fit_error: float
    method: str = "PSI"
    excitation_score: float = 0.0

    @property
    def orders(self) -> tuple:
        return self.tf.orders

    def to_dict(self) -> dict:
        return {
            "num": list(self.tf.num),
            "den": list(self.tf.den),
            "sample_period": self.tf.sample_period,
            "orders": list(self.orders),
            "fit_error": self.fit_error,
            "method": self.method,
            "excitation_score": self.excitation_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LearnedModel":
        tf = TransferFunction(d["num"], d.get("den", ()), d.get("sample_period", 1.0))
        return cls(tf, float(d.get("fit_error", 0.0)), d.get("method", "PSI"), float(d.get("excitation_score", 0.0)))


@dataclass
class AttackSignal:
    samples: tuple
    injection_step: int
    stream: Stream = Stream.FORWARD

    def __post_init__(self):
        self.samples = tuple(float(s) for s in self.samples)
        self.stream = Stream.parse(self.stream)
        if not self.samples:
            raise ValueError("attack signal must have at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("attack signal samples must be finite")
        # forward packets reach the plant one step after they are sent
        if self.stream is Stream.FORWARD and self.injection_step < 1:
            raise ValueError("forward-stream injection must start at step >= 1")


def impulse_probe(reference_magnitude: float, injection_step: int, stream=Stream.FORWARD, fraction: float = 0.05) -> AttackSignal:
    """Unit impulse scaled to ``fraction`` of the reference magnitude."""
    return AttackSignal((fraction * abs(reference_magnitude),), injection_step, stream)


class ProbeInjector(MitmHandler):
    """Adds ``a(j)`` to the packet that reaches its receiver at ``injection_step + j``."""

    def __init__(self, signal: AttackSignal):
        self.signal = signal

    def _apply(self, packet):
        j = packet.arrival - self.signal.injection_step
        if 0 <= j < len(self.signal.samples):
            return packet.value + self.signal.samples[j]
        return packet.value

    def forward(self, packet):
        return self._apply(packet) if self.signal.stream is Stream.FORWARD else packet.value

    def feedback(self, packet):
        return self._apply(packet) if self.signal.stream is Stream.FEEDBACK else packet.value


@dataclass
class LoopHandle:
    """What an inline attacker can do with a live loop: run it, optionally tapping in."""

    controller: TransferFunction
    plant: TransferFunction
    reference: object
    horizon: int
    capabilities: frozenset = frozenset()
    faults: tuple = ()
    seed: int = 0
    controller_schedule: Optional[object] = None

    def run(self, mitm: Optional[MitmHandler] = None) -> LoopTrace:
        return run_loop(
            self.controller,
            self.plant,
            self.reference,
            self.horizon,
            faults=self.faults,
            mitm=mitm,
            seed=self.seed,
            controller_schedule=self.controller_schedule,
        )


def excitation_score(series) -> float:
    """Sample variance of first differences over the series RMS.

    Zero for constant (including all-zero) series.
    """
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("series must be non-empty")
    if x.size < 3:
        return 0.0
    rms = np.sqrt(np.mean(x * x))
    if rms == 0.0:
        return 0.0
    return float(np.var(np.diff(x), ddof=1) / rms)


class OutputErrorFitness:
    """RMS of ``simulate(candidate, inputs) - outputs`` over one or more records.

    Picklable, so it can be shipped to a process pool evaluator.
    """

    def __init__(self, records, n: int, m: int):
        self.records = [(np.asarray(i, dtype=float), np.asarray(o, dtype=float)) for i, o in records]
        self.n, self.m = n, m
        self._count = sum(o.size for _, o in self.records)
        self._pad = np.zeros(m - n)

    def __call__(self, coeffs) -> float:
        b = np.concatenate([self._pad, coeffs[: self.n + 1]])
        a = np.concatenate([[1.0], coeffs[self.n + 1 :]])
        total = 0.0
        with np.errstate(all="ignore"):
            for i, o in self.records:
                d = lfilter(b, a, i) - o
                total += float(d @ d)
        return float(np.sqrt(total / self._count))


def _check_orders(n: int, m: int):
    if n < 0 or m < 0:
        raise OrderMismatch(f"orders must be non-negative, got n={n}, m={m}")
    if n > m:
        raise OrderMismatch(f"numerator order n={n} exceeds denominator order m={m}")


def _identify(records, n, m, optimizer, config, sample_period, method, score):
    config = config or DEFAULT_IDENTIFICATION_CONFIG
    if config.bounds is None:
        b = DEFAULT_COEFFICIENT_BOUND
        config = config.with_bounds([(-b, b)] * (n + 1 + m))
    elif len(config.bounds) != n + 1 + m:
        raise OrderMismatch(f"bounds cover {len(config.bounds)} coefficients, orders need {n + 1 + m}")
    fitness = OutputErrorFitness(records, n, m)
    best = minimize(fitness, config, optimizer)
    tf = TransferFunction.from_coefficients(best.position, n, m, sample_period)
    return LearnedModel(tf, best.fitness, method, score)


def psi_identify(
    i_series,
    o_series,
    n: int,
    m: int,
    optimizer: str = "BSA",
    config: Optional[OptimizerConfig] = None,
    threshold: float = DEFAULT_EXCITATION_THRESHOLD,
    sample_period: float = 1.0,
) -> LearnedModel:
    """Passive identification from an eavesdropped input/output pair.

    Raises
    ------
    OrderMismatch
        If ``n > m``.
    PoorExcitation
        If the input series does not clear the excitation gate.
    """
    _check_orders(n, m)
    i_series = np.asarray(i_series, dtype=float)
    o_series = np.asarray(o_series, dtype=float)
    if i_series.shape != o_series.shape or i_series.ndim != 1:
        raise ValueError("input and output series must be aligned 1-D sequences")
    needed = max(1, 10 * (n + m))
    if i_series.size < needed:
        raise ValueError(f"need at least {needed} samples for orders ({n}, {m}), got {i_series.size}")
    score = excitation_score(i_series)
    if not score > threshold:
        raise PoorExcitation(f"excitation score {score:.3g} does not exceed {threshold:g}")
    return _identify([(i_series, o_series)], n, m, optimizer, config, sample_period, "PSI", score)


def asi_identify(
    loop: LoopHandle,
    probe: AttackSignal,
    n: int,
    m: int,
    optimizer: str = "BSA",
    config: Optional[OptimizerConfig] = None,
    window: int = 50,
    threshold: float = DEFAULT_EXCITATION_THRESHOLD,
    target: str = "plant",
) -> LearnedModel:
    """Active identification with an injected probe.

    The loop is run twice, with and without the probe.  Because both runs
    share everything up to ``probe.injection_step``, the differences over
    the following ``window`` samples form zero-state input/output records:
    delivered plant input against plant output for ``target="plant"`` (with
    the loop open the input deviation is the probe itself), and controller
    error against sent control for ``target="controller"``.
    """
    if target not in ("plant", "controller"):
        raise ValueError(f"target must be 'plant' or 'controller', got {target!r}")
    missing = _ASI_CAPABILITIES - frozenset(loop.capabilities)
    if missing:
        raise InjectionDenied(missing, "ASI")
    _check_orders(n, m)
    start, stop = probe.injection_step, probe.injection_step + window
    if stop > loop.horizon:
        raise ValueError(f"observation window [{start}, {stop}) exceeds horizon {loop.horizon}")
    if window < max(1, 10 * (n + m)):
        raise ValueError(f"window of {window} samples is too short for orders ({n}, {m})")

    baseline = loop.run()
    probed = loop.run(ProbeInjector(probe))
    if target == "plant":
        du = probed.control_delivered[start:stop] - baseline.control_delivered[start:stop]
        dy = probed.plant_output[start:stop] - baseline.plant_output[start:stop]
        sample_period = loop.plant.sample_period
    else:
        du = baseline.feedback_delivered[start:stop] - probed.feedback_delivered[start:stop]
        dy = probed.control_sent[start:stop] - baseline.control_sent[start:stop]
        sample_period = loop.controller.sample_period

    score = excitation_score(du)
    if not score > threshold:
        raise PoorExcitation(f"probe produced no usable deviation (score {score:.3g})")
    return _identify([(du, dy)], n, m, optimizer, config, sample_period, "ASI", score)


def refine(models: Sequence[LearnedModel], records=None) -> LearnedModel:
    """Combine repeated fits by taking the per-coefficient median.

    ``records``, a list of ``(inputs, outputs)`` pairs, lets the fit error
    be recomputed on the pooled data; otherwise the worst input error is
    kept as a conservative bound.
    """
    models = list(models)
    if len(models) < 3:
        raise ValueError(f"refine needs at least 3 models, got {len(models)}")
    orders = {mdl.orders for mdl in models}
    if len(orders) != 1:
        raise MixedOrders(f"cannot refine models of different orders: {sorted(orders)}")
    n, m = orders.pop()
    coeffs = np.median(np.array([mdl.tf.coefficients for mdl in models]), axis=0)
    tf = TransferFunction.from_coefficients(coeffs, n, m, models[0].tf.sample_period)
    if records:
        fit_error = OutputErrorFitness(records, n, m)(coeffs)
    else:
        fit_error = max(mdl.fit_error for mdl in models)
    method = "+".join(sorted({mdl.method for mdl in models}))
    score = float(np.median([mdl.excitation_score for mdl in models]))
    return LearnedModel(tf, fit_error, method, score)


def denoise(series, window: int) -> np.ndarray:
    """Centred moving median; the window shrinks symmetrically at the edges."""
    if window < 1 or window % 2 == 0:
        raise InvalidWindow(f"window must be a positive odd integer, got {window}")
    x = np.asarray(series, dtype=float)
    half = window // 2
    if window == 1 or x.size == 0:
        return x.copy()
    out = np.empty_like(x)
    if x.size >= window:
        out[half : x.size - half] = np.median(sliding_window_view(x, window), axis=1)
    for i in list(range(min(half, x.size))) + list(range(max(half, x.size - half), x.size)):
        h = min(half, i, x.size - 1 - i)
        out[i] = np.median(x[i - h : i + h + 1])
    return out
