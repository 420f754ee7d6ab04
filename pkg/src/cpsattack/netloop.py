"""Sample-synchronous networked control loop.

Controller and plant exchange one packet per step on each stream:

* ``FORWARD`` carries the control signal ``u(k)`` from the controller to
  the plant and has one step of nominal transport delay;
* ``FEEDBACK`` carries the plant measurement ``y(k)`` back and is
  delivered within the same step.

Each packet goes through the channel faults in the fixed order
Inject -> Jitter -> Loss and then, if it survived, through the optional
man-in-the-middle handler.  A receiver that gets nothing new in a step
keeps using the last value it accepted (hold-last); late packets older
than the value already held are discarded.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .errors import ConflictingFault, SchemaError
from .lti import DIVERGENCE_BOUND, SimState, TransferFunction, _reference_array

__all__ = [
    "Stream",
    "PacketEvent",
    "ChannelFault",
    "Jitter",
    "Loss",
    "Inject",
    "MitmHandler",
    "LoopTrace",
    "run_loop",
    "eavesdrop",
    "NOMINAL_DELAY",
]


class Stream(str, enum.Enum):
    FORWARD = "forward"
    FEEDBACK = "feedback"

    @classmethod
    def parse(cls, value) -> "Stream":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise SchemaError(f"unknown stream {value!r}; expected 'forward' or 'feedback'") from None


NOMINAL_DELAY = {Stream.FORWARD: 1, Stream.FEEDBACK: 0}


@dataclass
class PacketEvent:
    seq: int
    k: int
    stream: Stream
    value: float
    delay: int = 0
    dropped: bool = False
    tampered: bool = False

    @property
    def arrival(self) -> int:
        """Step at which the receiver can use this packet."""
        return self.k + NOMINAL_DELAY[self.stream] + self.delay

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "k": self.k,
            "stream": self.stream.value,
            "value": self.value,
            "delay": self.delay,
            "dropped": self.dropped,
            "tampered": self.tampered,
        }


@dataclass(frozen=True)
class ChannelFault:
    stream: Stream = Stream.FORWARD

    def __post_init__(self):
        object.__setattr__(self, "stream", Stream.parse(self.stream))


@dataclass(frozen=True)
class Jitter(ChannelFault):
    """Extra integer delay per step: ``{step: extra_steps}``."""

    schedule: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        for step, extra in self.schedule.items():
            if int(extra) < 0:
                raise SchemaError(f"jitter at step {step} is negative ({extra})")


@dataclass(frozen=True)
class Loss(ChannelFault):
    """Drop packets by sequence number, or independently with probability ``p``."""

    mask: frozenset = frozenset()
    p: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "mask", frozenset(int(s) for s in self.mask))
        if not 0.0 <= self.p <= 1.0:
            raise SchemaError(f"loss probability must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class Inject(ChannelFault):
    """Replace the packet value at given steps: ``{step: value}``."""

    overrides: Mapping[int, float] = field(default_factory=dict)


class MitmHandler:
    """Inline attacker hook.

    Subclasses override :meth:`forward` and/or :meth:`feedback`.  Each
    receives a surviving packet and returns the value to pass on, or
    ``None`` to swallow it.  The default is a transparent relay.
    """

    def forward(self, packet: PacketEvent) -> Optional[float]:
        return packet.value

    def feedback(self, packet: PacketEvent) -> Optional[float]:
        return packet.value


@dataclass
class LoopTrace:
    reference: np.ndarray
    control_sent: np.ndarray
    control_delivered: np.ndarray
    plant_output: np.ndarray
    feedback_delivered: np.ndarray
    packets: list = field(default_factory=list)
    diverged: bool = False

    def __len__(self) -> int:
        return len(self.plant_output)

    def dropped(self, stream: Optional[Stream] = None) -> list:
        return [p for p in self.packets if p.dropped and (stream is None or p.stream == stream)]

    def tampered(self, stream: Optional[Stream] = None) -> list:
        return [p for p in self.packets if p.tampered and (stream is None or p.stream == stream)]


class _Channel:
    """Fault pipeline plus receiver buffer for one stream."""

    def __init__(self, stream, faults, mitm, seed):
        self.stream = stream
        self.overrides = {}
        for f in faults:
            if isinstance(f, Inject):
                for step, value in f.overrides.items():
                    step = int(step)
                    if step in self.overrides and self.overrides[step] != float(value):
                        raise ConflictingFault(
                            f"two injections disagree at step {step} on the {stream.value} stream"
                        )
                    self.overrides[step] = float(value)
        self.jitter = [f for f in faults if isinstance(f, Jitter)]
        self.losses = [
            (f, np.random.default_rng(seed if f.seed is None else f.seed) if f.p > 0 else None)
            for f in faults
            if isinstance(f, Loss)
        ]
        self.hook = None
        if mitm is not None:
            self.hook = mitm.forward if stream is Stream.FORWARD else mitm.feedback
        self.pending = {}
        self.held_seq = -1
        self.held = 0.0

    def send(self, k: int, value: float) -> PacketEvent:
        pkt = PacketEvent(seq=k, k=k, stream=self.stream, value=value)
        if k in self.overrides:
            pkt.value = self.overrides[k]
            pkt.tampered = True
        for j in self.jitter:
            pkt.delay += int(j.schedule.get(k, 0))
        for loss, rng in self.losses:
            # one draw per packet keeps the random stream aligned with k
            hit = rng is not None and rng.random() < loss.p
            if k in loss.mask or hit:
                pkt.dropped = True
        if not pkt.dropped and self.hook is not None:
            new = self.hook(pkt)
            if new is None:
                pkt.dropped = True
            elif new != pkt.value:
                pkt.value = float(new)
                pkt.tampered = True
        if not pkt.dropped:
            self.pending.setdefault(pkt.arrival, []).append(pkt)
        return pkt

    def receive(self, k: int) -> float:
        for pkt in self.pending.pop(k, ()):
            if pkt.seq > self.held_seq:
                self.held_seq, self.held = pkt.seq, pkt.value
        return self.held


def run_loop(
    controller: TransferFunction,
    plant: TransferFunction,
    reference,
    horizon: int,
    faults: Iterable[ChannelFault] = (),
    mitm: Optional[MitmHandler] = None,
    seed: int = 0,
    controller_schedule: Optional[Callable[[int], TransferFunction]] = None,
    bound: float = DIVERGENCE_BOUND,
    log_packets: bool = True,
) -> LoopTrace:
    """Simulate the networked loop step by step.

    ``controller_schedule``, when given, is called with the step index
    before the controller update and returns the controller transfer
    function to use from that step on (same orders as ``controller``);
    controller memory is carried across switches.

    The run stops early, with ``diverged=True`` and truncated series, as
    soon as ``|y|`` exceeds ``bound``.
    """
    if horizon < 1:
        raise SchemaError("horizon must be >= 1")
    faults = list(faults)
    ref = _reference_array(reference, horizon)
    fwd = _Channel(Stream.FORWARD, [f for f in faults if f.stream is Stream.FORWARD], mitm, seed)
    fbk = _Channel(Stream.FEEDBACK, [f for f in faults if f.stream is Stream.FEEDBACK], mitm, seed + 1)

    ctrl, proc = SimState(controller), SimState(plant)
    u_sent = np.zeros(horizon)
    u_del = np.zeros(horizon)
    y_out = np.zeros(horizon)
    fb_del = np.zeros(horizon)
    packets = []
    diverged = False
    last = horizon

    for k in range(horizon):
        u_del[k] = fwd.receive(k)
        y = proc.step(u_del[k])
        y_out[k] = y
        if not abs(y) <= bound:
            diverged, last = True, k + 1
            break
        pkt = fbk.send(k, y)
        fb_del[k] = fbk.receive(k)
        if controller_schedule is not None:
            ctrl.tf = controller_schedule(k)
        u = ctrl.step(ref[k] - fb_del[k])
        u_sent[k] = u
        pkt2 = fwd.send(k, u)
        if log_packets:
            packets.append(pkt)
            packets.append(pkt2)

    return LoopTrace(
        reference=ref[:last].copy(),
        control_sent=u_sent[:last],
        control_delivered=u_del[:last],
        plant_output=y_out[:last],
        feedback_delivered=fb_del[:last],
        packets=packets,
        diverged=diverged,
    )


def eavesdrop(trace: LoopTrace, stream=Stream.FORWARD):
    """Input/output pair visible to a passive tap.

    ``FORWARD`` yields the plant pair ``(u delivered, y)``.  ``FEEDBACK``
    yields the controller pair ``(r - feedback delivered, u sent)``, which
    assumes the attacker knows the setpoint.
    """
    stream = Stream.parse(stream)
    if stream is Stream.FORWARD:
        return trace.control_delivered.copy(), trace.plant_output.copy()
    return trace.reference - trace.feedback_delivered, trace.control_sent.copy()
