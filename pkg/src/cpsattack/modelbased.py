"""Model-based disruption attacks and the attack-class roadmap.

The attacks here consume models learned by :mod:`cpsattack.cpi`:

* controlled data injection: a gain/bias rewrite of one stream over a
  window, tuned in simulation to hit an overshoot or steady-state-error goal;
* covert misappropriation: ``U* = U + dU`` on the forward stream while the
  feedback is corrected by ``dM = M_est - M_exp`` computed from two copies
  of the learned plant;
* controlled data loss: a drop mask found by a metaheuristic over a
  ``[0, 1]`` relaxation, scored by distance to a goal plus a per-drop cost.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .cpi import LearnedModel
from .errors import GoalUnreachable, HorizonTooLarge, SchemaError
from .lti import SimState, StepMetrics, TransferFunction, step_metrics
from .netloop import Loss, MitmHandler, Stream, run_loop
from .optimizers import OptimizerConfig, minimize

__all__ = [
    "Capability",
    "AttackClass",
    "AttackSpec",
    "REQUIREMENTS",
    "check_requirements",
    "Overshoot",
    "SteadyStateError",
    "TargetTrajectory",
    "InjectionFunction",
    "InjectionMitm",
    "SdcdiDesign",
    "design_sdcdi",
    "CovertState",
    "covert_mitm_step",
    "CovertMitm",
    "DropMask",
    "DropPlan",
    "drop_fitness",
    "optimize_drop_sequence",
    "DROP_SEARCH_CAP",
]


class Capability(str, enum.Enum):
    LOOP_ACCESS = "LoopAccess"
    DATA_ACCESS = "DataAccess"
    SYSTEM_KNOWLEDGE = "SystemKnowledge"


class AttackClass(str, enum.Enum):
    EAVESDROP = "Eavesdrop"
    PSI = "PSI"
    ASI = "ASI"
    DOS_ARB_JITTER = "DoSArbJitter"
    DOS_ARB_LOSS = "DoSArbLoss"
    DOS_ARB_INJECT = "DoSArbInject"
    DOS_CTL_JITTER = "DoSCtlJitter"
    DOS_CTL_LOSS = "DoSCtlLoss"
    DOS_CTL_INJECT = "DoSCtlInject"
    SD_CTL_JITTER = "SDCtlJitter"
    SD_CTL_LOSS = "SDCtlLoss"
    SD_CTL_INJECT = "SDCtlInject"


_L, _D, _K = Capability.LOOP_ACCESS, Capability.DATA_ACCESS, Capability.SYSTEM_KNOWLEDGE

# Jitter and loss only need a foothold in the loop; anything that reads or
# writes packet contents needs data access; every controlled class also
# needs a learned model of the target.
REQUIREMENTS = {
    AttackClass.EAVESDROP: frozenset({_L, _D}),
    AttackClass.PSI: frozenset({_L, _D}),
    AttackClass.ASI: frozenset({_L, _D}),
    AttackClass.DOS_ARB_JITTER: frozenset({_L}),
    AttackClass.DOS_ARB_LOSS: frozenset({_L}),
    AttackClass.DOS_ARB_INJECT: frozenset({_L, _D}),
    AttackClass.DOS_CTL_JITTER: frozenset({_L, _K}),
    AttackClass.DOS_CTL_LOSS: frozenset({_L, _K}),
    AttackClass.DOS_CTL_INJECT: frozenset({_L, _D, _K}),
    AttackClass.SD_CTL_JITTER: frozenset({_L, _K}),
    AttackClass.SD_CTL_LOSS: frozenset({_L, _K}),
    AttackClass.SD_CTL_INJECT: frozenset({_L, _D, _K}),
}


@dataclass(frozen=True)
class AttackSpec:
    attack_class: AttackClass
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "attack_class", AttackClass(self.attack_class))
        except ValueError:
            raise SchemaError(
                f"unknown attack class {self.attack_class!r}; expected one of "
                f"{[c.value for c in AttackClass]}"
            ) from None

    @property
    def required_capabilities(self) -> frozenset:
        return REQUIREMENTS[self.attack_class]


def check_requirements(spec, capabilities) -> frozenset:
    """Capabilities the attack still lacks; an empty set means it may run."""
    attack_class = spec.attack_class if isinstance(spec, AttackSpec) else AttackClass(spec)
    granted = {Capability(c) for c in capabilities}
    return frozenset(REQUIREMENTS[attack_class] - granted)


# -- goals -------------------------------------------------------------------


@dataclass(frozen=True)
class Overshoot:
    target_pct: float


@dataclass(frozen=True)
class SteadyStateError:
    target: float


@dataclass(frozen=True)
class TargetTrajectory:
    series: tuple

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(float(v) for v in self.series))


def _final_reference(reference, horizon):
    return float(reference) if np.ndim(reference) == 0 else float(np.asarray(reference)[horizon - 1])


# -- controlled data injection -----------------------------------------------


@dataclass(frozen=True)
class InjectionFunction:
    """``value' = gain * value + bias`` for packets applied within ``[start, end]``."""

    gain: float = 1.0
    bias: float = 0.0
    start: int = 0
    end: int = 2**31 - 1
    stream: Stream = Stream.FORWARD

    def __post_init__(self):
        object.__setattr__(self, "stream", Stream.parse(self.stream))
        if self.start > self.end:
            raise SchemaError(f"injection window start {self.start} is after end {self.end}")
        if not (math.isfinite(self.gain) and math.isfinite(self.bias)):
            raise SchemaError("injection gain and bias must be finite")

    def is_identity(self) -> bool:
        return self.gain == 1.0 and self.bias == 0.0

    def apply(self, step: int, value: float) -> float:
        if self.start <= step <= self.end:
            return self.gain * value + self.bias
        return value

    def to_dict(self) -> dict:
        return {"gain": self.gain, "bias": self.bias, "start": self.start, "end": self.end, "stream": self.stream.value}


class InjectionMitm(MitmHandler):
    def __init__(self, injection: InjectionFunction):
        self.injection = injection

    def forward(self, packet):
        if self.injection.stream is Stream.FORWARD:
            return self.injection.apply(packet.arrival, packet.value)
        return packet.value

    def feedback(self, packet):
        if self.injection.stream is Stream.FEEDBACK:
            return self.injection.apply(packet.arrival, packet.value)
        return packet.value


@dataclass
class SdcdiDesign:
    injection: InjectionFunction
    predicted: StepMetrics
    mismatch: float


def _goal_mismatch(goal, metrics: StepMetrics, reference: float) -> float:
    if isinstance(goal, Overshoot):
        return abs(metrics.overshoot_pct - goal.target_pct)
    if isinstance(goal, SteadyStateError):
        scale = abs(goal.target) if goal.target != 0 else abs(reference)
        return abs(metrics.steady_state_error - goal.target) / scale
    raise TypeError(f"unsupported injection goal {goal!r}")


def design_sdcdi(
    learned_controller: LearnedModel,
    learned_plant: LearnedModel,
    goal: Union[Overshoot, SteadyStateError],
    reference,
    horizon: int,
    optimizer: str = "BSA",
    config: Optional[OptimizerConfig] = None,
    stream=Stream.FORWARD,
    window: Optional[tuple] = None,
    search: str = "both",
    gain_bounds: tuple = (0.0, 3.0),
    bias_bounds: Optional[tuple] = None,
    tolerance: Optional[float] = None,
    settle_band_pct: float = 2.0,
) -> SdcdiDesign:
    """Tune a gain/bias injection on the learned loop to meet ``goal``.

    ``search`` selects the free parameters: ``"both"``, ``"gain"`` (bias
    held at 0) or ``"bias"`` (gain held at 1).  Among candidates meeting the
    goal equally well the least intrusive one wins: the score carries a
    1e-6 weighted distance from the identity injection, and the identity is
    always evaluated alongside the optimizer's answer.

    ``tolerance`` defaults to 2 percentage points for overshoot goals and
    5% relative for steady-state-error goals; a best candidate outside it
    raises :class:`GoalUnreachable`.  Only the learned models are simulated.
    """
    stream = Stream.parse(stream)
    ref_final = _final_reference(reference, horizon)
    start, end = window if window is not None else (0, horizon - 1)
    if tolerance is None:
        tolerance = 2.0 if isinstance(goal, Overshoot) else 0.05
    if bias_bounds is None:
        span = 2.0 * max(abs(ref_final), 1e-12)
        bias_bounds = (-span, span)
    if search not in ("both", "gain", "bias"):
        raise ValueError(f"search must be 'both', 'gain' or 'bias', got {search!r}")
    config = config or OptimizerConfig(population_size=20, max_iterations=60)
    bounds = {"both": [gain_bounds, bias_bounds], "gain": [gain_bounds], "bias": [bias_bounds]}[search]
    config = config.with_bounds(bounds)

    def unpack(x):
        if search == "both":
            return float(x[0]), float(x[1])
        if search == "gain":
            return float(x[0]), 0.0
        return 1.0, float(x[0])

    def evaluate(gain, bias):
        inj = InjectionFunction(gain, bias, start, end, stream)
        trace = run_loop(
            learned_controller.tf, learned_plant.tf, reference, horizon,
            mitm=InjectionMitm(inj), log_packets=False,
        )
        if trace.diverged:
            return math.inf, None, inj
        metrics = step_metrics(trace.plant_output, ref_final, settle_band_pct)
        return _goal_mismatch(goal, metrics, ref_final), metrics, inj

    def fitness(x):
        gain, bias = unpack(x)
        mismatch, _, _ = evaluate(gain, bias)
        return mismatch + 1e-6 * (abs(gain - 1.0) + abs(bias) / max(abs(ref_final), 1e-12))

    best = minimize(fitness, config, optimizer)
    gain, bias = unpack(best.position)
    candidates = [(1.0, 0.0), (gain, bias)]
    scored = [(fitness(np.array(_pack(g, b, search))), g, b) for g, b in candidates]
    _, gain, bias = min(scored, key=lambda t: t[0])

    mismatch, metrics, inj = evaluate(gain, bias)
    if not mismatch <= tolerance:
        raise GoalUnreachable(f"best injection misses the goal by {mismatch:.4g} (tolerance {tolerance:g})")
    return SdcdiDesign(inj, metrics, mismatch)


def _pack(gain, bias, search):
    return {"both": [gain, bias], "gain": [gain], "bias": [bias]}[search]


# -- covert misappropriation ---------------------------------------------------


class CovertState:
    """Two lock-stepped copies of the learned plant.

    ``est_sim`` sees the manipulated input ``U*`` and ``exp_sim`` the
    legitimate ``U``; their output difference is the attack's footprint on
    the measurement.  Both start from zero state, so the attacker must be
    in place from the first control sample.
    """

    def __init__(self, learned: LearnedModel):
        self.learned = learned
        self.est_sim = SimState(learned.tf)
        self.exp_sim = SimState(learned.tf)


def covert_mitm_step(state: CovertState, u: float, delta_u: float):
    """Return ``(u_star, delta_m)`` for one control sample.

    The caller forwards ``u_star`` to the plant and subtracts ``delta_m``
    from the measurement produced by that same sample.
    """
    u_star = u + delta_u
    m_est = state.est_sim.step(u_star)
    m_exp = state.exp_sim.step(u)
    return u_star, m_est - m_exp


class CovertMitm(MitmHandler):
    """Inline covert attacker.

    ``delta_u`` maps the plant step at which a control sample is applied to
    the disturbance added to it (a callable, a mapping, or a sequence
    indexed by step, zero beyond its end).
    """

    def __init__(self, learned_plant: LearnedModel, delta_u):
        self.state = CovertState(learned_plant)
        self.delta_u = delta_u
        self._corrections = {}
        self.injected = 0

    def _disturbance(self, step):
        d = self.delta_u
        if callable(d):
            return float(d(step))
        if isinstance(d, dict):
            return float(d.get(step, 0.0))
        return float(d[step]) if 0 <= step < len(d) else 0.0

    def forward(self, packet):
        du = self._disturbance(packet.arrival)
        u_star, dm = covert_mitm_step(self.state, packet.value, du)
        self._corrections[packet.arrival] = dm
        if du != 0.0:
            self.injected += 1
        return u_star

    def feedback(self, packet):
        dm = self._corrections.pop(packet.arrival, 0.0)
        return packet.value - dm


# -- controlled data loss --------------------------------------------------------

DROP_SEARCH_CAP = 16


@dataclass(frozen=True)
class DropMask:
    drops: frozenset
    horizon: int

    def __post_init__(self):
        drops = frozenset((Stream.parse(s), int(q)) for s, q in self.drops)
        for s, q in drops:
            if not 0 <= q < self.horizon:
                raise SchemaError(f"drop of {s.value} packet {q} lies outside horizon {self.horizon}")
        object.__setattr__(self, "drops", drops)

    def __len__(self) -> int:
        return len(self.drops)

    def faults(self) -> list:
        out = []
        for stream in Stream:
            seqs = frozenset(q for s, q in self.drops if s is stream)
            if seqs:
                out.append(Loss(stream=stream, mask=seqs))
        return out

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "drops": [[s.value, q] for s, q in sorted(self.drops, key=lambda t: (t[0].value, t[1]))],
        }


@dataclass
class DropPlan:
    mask: DropMask
    fitness: float
    deviation: float
    predicted: Optional[StepMetrics]


def drop_fitness(
    controller: TransferFunction,
    plant: TransferFunction,
    reference,
    horizon: int,
    goal,
    mask: DropMask,
    drop_penalty: float = 0.0,
):
    """``(fitness, deviation, trace)`` of one drop mask on the given models.

    The deviation is the output RMS distance to a target trajectory, or for
    an overshoot goal the overshoot miss expressed as a fraction of the
    reference (percentage points / 100).
    """
    trace = run_loop(controller, plant, reference, horizon, faults=mask.faults(), log_packets=False)
    if trace.diverged:
        return math.inf, math.inf, trace
    y = trace.plant_output
    if isinstance(goal, TargetTrajectory):
        target = np.asarray(goal.series[:horizon])
        deviation = float(np.sqrt(np.mean((y - target) ** 2)))
    elif isinstance(goal, Overshoot):
        metrics = step_metrics(y, _final_reference(reference, horizon))
        deviation = abs(metrics.overshoot_pct - goal.target_pct) / 100.0
    else:
        raise TypeError(f"unsupported drop goal {goal!r}")
    return deviation + drop_penalty * len(mask), deviation, trace


def optimize_drop_sequence(
    learned_controller: LearnedModel,
    learned_plant: LearnedModel,
    reference,
    horizon: int,
    goal: Union[TargetTrajectory, Overshoot],
    max_drops: Optional[int] = None,
    drop_penalty: float = 0.0,
    optimizer: str = "BSA",
    config: Optional[OptimizerConfig] = None,
    streams: Sequence = (Stream.FORWARD,),
    search_cap: int = DROP_SEARCH_CAP,
) -> DropPlan:
    """Search the packets to drop so the learned loop approaches ``goal``.

    Positions live in ``[0, 1]^(horizon * len(streams))``; coordinates above
    0.5 become drops.  When more than ``max_drops`` coordinates qualify,
    only the largest ones are kept (lowest index first on ties).
    """
    if drop_penalty < 0:
        raise ValueError("drop_penalty must be >= 0")
    streams = [Stream.parse(s) for s in streams]
    n_bits = horizon * len(streams)
    if n_bits > search_cap:
        raise HorizonTooLarge(f"{n_bits} mask bits exceed the search cap of {search_cap}")
    if isinstance(goal, TargetTrajectory) and len(goal.series) < horizon:
        raise SchemaError(f"target trajectory has {len(goal.series)} samples, horizon is {horizon}")
    max_drops = n_bits if max_drops is None else int(max_drops)
    config = (config or OptimizerConfig(population_size=30, max_iterations=300)).with_bounds([(0.0, 1.0)] * n_bits)

    def decode(x) -> DropMask:
        on = np.flatnonzero(x > 0.5)
        if on.size > max_drops:
            order = np.argsort(-x[on], kind="stable")
            on = np.sort(on[order[:max_drops]])
        return DropMask(frozenset((streams[i // horizon], i % horizon) for i in on), horizon)

    cache = {}

    def score(mask: DropMask):
        if mask.drops not in cache:
            cache[mask.drops] = drop_fitness(
                learned_controller.tf, learned_plant.tf, reference, horizon, goal, mask, drop_penalty
            )
        return cache[mask.drops]

    best = minimize(lambda x: score(decode(x))[0], config, optimizer)
    mask = decode(best.position)
    fit, deviation, trace = score(mask)
    predicted = None
    if not trace.diverged:
        ref_final = _final_reference(reference, horizon)
        if ref_final != 0:
            predicted = step_metrics(trace.plant_output, ref_final)
    return DropPlan(mask, fit, deviation, predicted)
