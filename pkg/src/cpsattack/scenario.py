"""Scenario files: loading, execution and run reports.

A scenario is a TOML document (layout in ``docs/scenario-schema.md``,
structure checked against the bundled ``scenario.schema.json``).  Running
one produces, in its output directory:

``baseline.csv`` / ``trace.csv``
    Per-step series of the unattacked and attacked runs, columns
    ``k, reference, u_sent, u_delivered, y, feedback_delivered, residual``.
``packets.csv``
    Packet log of the attacked run.
``models.json``
    Learned models, when the attack has an identification stage.
``report.jsonl``
    One JSON record per run.
``timing.json``
    Wall-clock figures; the only artifact not reproducible bytewise.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cpi import AttackSignal, LearnedModel, LoopHandle, ProbeInjector, asi_identify, impulse_probe, psi_identify
from .defense import SwitchSchedule, check_schedule, expected_feedback, residual_monitor
from .errors import CapabilityMissing, CpsAttackError, DivergedResponse, SchemaError
from .lti import StepMetrics, TransferFunction, make_pi_controller, step_metrics
from .modelbased import (
    AttackClass,
    AttackSpec,
    Capability,
    CovertMitm,
    InjectionMitm,
    Overshoot,
    SteadyStateError,
    TargetTrajectory,
    DROP_SEARCH_CAP,
    check_requirements,
    design_sdcdi,
    optimize_drop_sequence,
)
from .netloop import Inject, Jitter, Loss, LoopTrace, Stream, eavesdrop, run_loop
from .optimizers import OptimizerConfig

__all__ = [
    "ReferenceSpec",
    "ScenarioConfig",
    "RunReport",
    "MissingArtifact",
    "load_scenario",
    "parse_scenario",
    "run",
    "report",
    "load_models",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("k", "reference", "u_sent", "u_delivered", "y", "feedback_delivered", "residual")
PACKET_COLUMNS = ("seq", "k", "stream", "value", "delay", "dropped", "tampered")

_IDENTIFYING = {
    AttackClass.DOS_CTL_LOSS,
    AttackClass.DOS_CTL_INJECT,
    AttackClass.SD_CTL_LOSS,
    AttackClass.SD_CTL_INJECT,
}
_INJECTING = {AttackClass.DOS_CTL_INJECT, AttackClass.SD_CTL_INJECT}
_DROPPING = {AttackClass.DOS_CTL_LOSS, AttackClass.SD_CTL_LOSS}
_CPI_NEEDS = frozenset({Capability.LOOP_ACCESS, Capability.DATA_ACCESS})


class MissingArtifact(CpsAttackError):
    exit_code = 1


@dataclass(frozen=True)
class ReferenceSpec:
    kind: str = "step"
    value: float = 1.0
    period: int = 100
    samples: tuple = ()

    def series(self, horizon: int) -> np.ndarray:
        if self.kind == "step":
            return np.full(horizon, self.value)
        if self.kind == "square":
            k = np.arange(horizon)
            return np.where((k % self.period) < self.period // 2, self.value, 0.0)
        s = np.asarray(self.samples, dtype=float)
        if s.size < horizon:
            s = np.concatenate([s, np.full(horizon - s.size, s[-1])])
        return s[:horizon]

    def target_value(self, horizon: int) -> float:
        """Scalar the step metrics are measured against."""
        if self.kind == "samples":
            return float(self.series(horizon)[-1])
        return float(self.value)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "samples":
            d["samples"] = list(self.samples)
        else:
            d["value"] = self.value
        if self.kind == "square":
            d["period"] = self.period
        return d


@dataclass(frozen=True)
class ScenarioConfig:
    plant: TransferFunction
    controller: TransferFunction
    reference: ReferenceSpec
    horizon: int
    name: str = "scenario"
    attack: Optional[AttackSpec] = None
    defense: Optional[SwitchSchedule] = None
    capabilities: frozenset = frozenset()
    optimizer: OptimizerConfig = OptimizerConfig(population_size=30, max_iterations=2000)
    algorithm: str = "BSA"
    seed: int = 0
    monitor_threshold: Optional[float] = None
    outputs_dir: Optional[str] = None
    source: Optional[str] = None

    def reference_series(self) -> np.ndarray:
        return self.reference.series(self.horizon)

    @property
    def reference_value(self) -> float:
        return self.reference.target_value(self.horizon)

    @property
    def threshold(self) -> float:
        if self.monitor_threshold is not None:
            return self.monitor_threshold
        return 0.01 * max(abs(self.reference_value), 1e-12)

    def controller_schedule(self):
        return self.defense.as_schedule(self.controller.sample_period) if self.defense else None

    def initial_controller(self) -> TransferFunction:
        if self.defense:
            return make_pi_controller(*self.defense.gain_sets[0], self.controller.sample_period)
        return self.controller

    def loop_handle(self) -> LoopHandle:
        return LoopHandle(
            self.initial_controller(),
            self.plant,
            self.reference_series(),
            self.horizon,
            capabilities=frozenset(c.value for c in self.capabilities),
            seed=self.seed,
            controller_schedule=self.controller_schedule(),
        )

    def run_loop(self, **kwargs) -> LoopTrace:
        return run_loop(
            self.initial_controller(),
            self.plant,
            self.reference_series(),
            self.horizon,
            seed=self.seed,
            controller_schedule=self.controller_schedule(),
            **kwargs,
        )


# -- loading -----------------------------------------------------------------

_REQUIRED = object()


class _Table:
    """Typed access to one TOML table with field-path diagnostics."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise SchemaError(f"{path}: expected a table")
        self.data, self.path, self.seen = data, path, set()

    def get(self, key, kind, default=_REQUIRED):
        self.seen.add(key)
        where = f"{self.path}.{key}"
        if key not in self.data:
            if default is _REQUIRED:
                raise SchemaError(f"{where}: required field is missing")
            return default
        value = self.data[key]
        ok = {
            "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
            "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
            "str": lambda v: isinstance(v, str),
            "bool": lambda v: isinstance(v, bool),
            "list": lambda v: isinstance(v, list),
            "table": lambda v: isinstance(v, dict),
        }[kind](value)
        if not ok:
            raise SchemaError(f"{where}: expected {kind}, got {type(value).__name__} {value!r}")
        return value

    def table(self, key):
        return _Table(self.get(key, "table", {}), f"{self.path}.{key}")

    def finish(self):
        extra = sorted(set(self.data) - self.seen)
        if extra:
            raise SchemaError(f"{self.path}: unknown field(s) {', '.join(extra)}")


def _schema():
    text = resources.files("cpsattack").joinpath("scenario.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_scenario(path, seed: Optional[int] = None) -> ScenarioConfig:
    """Read, validate and roadmap-check a scenario file.

    ``seed`` overrides the file's top-level seed.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read scenario ({exc.strerror})") from exc
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path}: scenario is not UTF-8 ({exc})") from exc
    except tomllib.TOMLDecodeError as exc:
        # message carries "(at line L, column C)"
        raise SchemaError(f"{path}: {exc}") from exc
    if seed is not None:
        data["seed"] = int(seed)
    return parse_scenario(data, source=str(path))


def parse_scenario(data: dict, source: Optional[str] = None) -> ScenarioConfig:
    label = source or "<scenario>"
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            where = ".".join(str(p) for p in err.absolute_path) or "<root>"
            lines.append(f"{label}: {where}: {err.message}")
        raise SchemaError("\n".join(lines))

    plant_tbl = data["plant"]
    plant = TransferFunction(plant_tbl["num"], plant_tbl.get("den", []), plant_tbl.get("sample_period", 1.0))
    ctl = data["controller"]
    if "kp" in ctl:
        controller = make_pi_controller(ctl["kp"], ctl["ki"], ctl.get("sample_period", plant.sample_period))
    else:
        controller = TransferFunction(ctl["num"], ctl.get("den", []), ctl.get("sample_period", plant.sample_period))

    ref_tbl = data["reference"]
    kind = ref_tbl["kind"]
    if kind in ("step", "square") and "value" not in ref_tbl:
        raise SchemaError(f"{label}: reference.value: required for kind '{kind}'")
    if kind == "samples" and "samples" not in ref_tbl:
        raise SchemaError(f"{label}: reference.samples: required for kind 'samples'")
    reference = ReferenceSpec(
        kind=kind,
        value=float(ref_tbl.get("value", 0.0)),
        period=int(ref_tbl.get("period", 100)),
        samples=tuple(float(v) for v in ref_tbl.get("samples", ())),
    )

    opt = data.get("optimizer", {})
    seed = int(data.get("seed", 0))
    optimizer = OptimizerConfig(
        population_size=opt.get("population_size", 30),
        max_iterations=opt.get("max_iterations", 2000),
        seed=opt.get("seed", seed),
        mix_rate=opt.get("mix_rate", 1.0),
        inertia=opt.get("inertia", 0.72),
        cognitive=opt.get("cognitive", 1.49),
        social=opt.get("social", 1.49),
    )

    defense = None
    if "defense" in data:
        if controller.orders != (1, 1):
            raise SchemaError(f"{label}: defense: switching needs a PI controller")
        defense = SwitchSchedule(tuple(tuple(g) for g in data["defense"]["gain_sets"]), data["defense"]["period"])

    config = ScenarioConfig(
        plant=plant,
        controller=controller,
        reference=reference,
        horizon=int(data["horizon"]),
        name=data.get("name", Path(source).stem if source else "scenario"),
        defense=defense,
        capabilities=frozenset(Capability(c) for c in data.get("capabilities", [])),
        optimizer=optimizer,
        algorithm=opt.get("algorithm", "BSA"),
        seed=seed,
        monitor_threshold=data.get("monitor", {}).get("threshold"),
        outputs_dir=data.get("outputs", {}).get("dir"),
        source=source,
    )
    if reference.kind != "samples" and config.reference_value == 0:
        raise SchemaError(f"{label}: reference.value: must be non-zero")
    if defense is not None:
        check_schedule(defense, plant, config.reference_series(), config.horizon)
    if "attack" in data:
        config = replace(config, attack=_parse_attack(data["attack"], config, opt))
    return config


def _stream(tbl, key="stream", default="forward"):
    try:
        return Stream.parse(tbl.get(key, "str", default))
    except SchemaError as exc:
        raise SchemaError(f"{tbl.path}.{key}: {exc}") from None


def _pairs(tbl, key, value_kind):
    out = {}
    for item in tbl.get(key, "list", []):
        if not (isinstance(item, list) and len(item) == 2 and isinstance(item[0], int)):
            raise SchemaError(f"{tbl.path}.{key}: entries must be [step, value] pairs, got {item!r}")
        if value_kind == "int" and not isinstance(item[1], int):
            raise SchemaError(f"{tbl.path}.{key}: delay for step {item[0]} must be an integer")
        if item[0] in out:
            raise SchemaError(f"{tbl.path}.{key}: step {item[0]} listed twice")
        out[int(item[0])] = item[1]
    return out


def _orders(tbl, key, default):
    value = tbl.get(key, "list", list(default))
    if len(value) != 2 or not all(isinstance(v, int) and v >= 0 for v in value):
        raise SchemaError(f"{tbl.path}.{key}: expected [n, m] with non-negative integers")
    if value[0] > value[1]:
        raise SchemaError(f"{tbl.path}.{key}: numerator order exceeds denominator order")
    return tuple(value)


def _design_optimizer(tbl, defaults, seed):
    sub = tbl.table("design_optimizer")
    cfg = OptimizerConfig(
        population_size=sub.get("population_size", "int", defaults[0]),
        max_iterations=sub.get("max_iterations", "int", defaults[1]),
        seed=sub.get("seed", "int", seed),
    )
    algorithm = sub.get("algorithm", "str", "BSA")
    if algorithm not in ("BSA", "PSO"):
        raise SchemaError(f"{sub.path}.algorithm: expected 'BSA' or 'PSO'")
    sub.finish()
    return cfg, algorithm


def _identification_params(tbl, config, params, needs_cpi):
    method = tbl.get("identification", "str", "PSI")
    if method not in ("PSI", "ASI", "exact"):
        raise SchemaError(f"{tbl.path}.identification: expected 'PSI', 'ASI' or 'exact'")
    params["identification"] = method
    if method != "exact":
        needs_cpi.append(method)
    params["plant_orders"] = _orders(tbl, "plant_orders", config.plant.orders)
    params["controller_orders"] = _orders(tbl, "controller_orders", config.controller.orders)
    observe = tbl.get("observe", "list", [0, config.horizon])
    if len(observe) != 2 or not 0 <= observe[0] < observe[1] <= config.horizon:
        raise SchemaError(f"{tbl.path}.observe: expected [start, stop] within the horizon")
    params["observe"] = tuple(observe)
    _probe_params(tbl, config, params)


def _probe_params(tbl, config, params):
    params["injection_step"] = tbl.get("injection_step", "int", config.horizon // 2)
    params["probe_fraction"] = float(tbl.get("probe_fraction", "number", 0.05))
    params["probe_stream"] = _stream(tbl, "probe_stream")
    params["window"] = tbl.get("window", "int", 50)
    if params["injection_step"] < 1 or params["injection_step"] + params["window"] > config.horizon:
        raise SchemaError(f"{tbl.path}.injection_step: probe window must fit inside the horizon")


def _goal(tbl, allowed):
    goal_tbl = tbl.table("goal")
    found = []
    if "overshoot_pct" in allowed and "overshoot_pct" in goal_tbl.data:
        found.append(Overshoot(float(goal_tbl.get("overshoot_pct", "number"))))
    if "steady_state_error" in allowed and "steady_state_error" in goal_tbl.data:
        found.append(SteadyStateError(float(goal_tbl.get("steady_state_error", "number"))))
    if "trajectory" in allowed and "trajectory" in goal_tbl.data:
        found.append(TargetTrajectory(goal_tbl.get("trajectory", "list")))
    goal_tbl.finish()
    if len(found) != 1:
        raise SchemaError(f"{goal_tbl.path}: give exactly one of {', '.join(allowed)}")
    return found[0]


def _parse_attack(raw: dict, config: ScenarioConfig, opt: dict) -> AttackSpec:
    tbl = _Table(raw, "attack")
    cls = AttackClass(tbl.get("class", "str"))
    params = {}
    needs_cpi = []

    if cls is AttackClass.EAVESDROP:
        params["stream"] = _stream(tbl)
    elif cls is AttackClass.PSI:
        _identification_params(tbl, config, params, needs_cpi)
        params["identification"] = "PSI"
    elif cls is AttackClass.ASI:
        params["identification"] = "ASI"
        params["plant_orders"] = _orders(tbl, "plant_orders", config.plant.orders)
        params["controller_orders"] = _orders(tbl, "controller_orders", config.controller.orders)
        _probe_params(tbl, config, params)
    elif cls is AttackClass.DOS_ARB_JITTER:
        params["stream"] = _stream(tbl)
        params["delays"] = _pairs(tbl, "delays", "int")
        if any(v < 0 for v in params["delays"].values()):
            raise SchemaError("attack.delays: delays must be non-negative")
    elif cls is AttackClass.DOS_ARB_LOSS:
        params["stream"] = _stream(tbl)
        mask = tbl.get("mask", "list", [])
        if not all(isinstance(q, int) and 0 <= q < config.horizon for q in mask):
            raise SchemaError("attack.mask: sequence numbers must be integers within the horizon")
        params["mask"] = tuple(sorted(set(mask)))
        params["probability"] = float(tbl.get("probability", "number", 0.0))
        if not 0.0 <= params["probability"] <= 1.0:
            raise SchemaError("attack.probability: must lie in [0, 1]")
        params["loss_seed"] = tbl.get("loss_seed", "int", config.seed)
    elif cls is AttackClass.DOS_ARB_INJECT:
        params["stream"] = _stream(tbl)
        params["overrides"] = _pairs(tbl, "overrides", "number")
    elif cls in _INJECTING:
        _identification_params(tbl, config, params, needs_cpi)
        mode = tbl.get("mode", "str", "injection")
        params["mode"] = mode
        if mode == "covert":
            params["delta_u"] = float(tbl.get("delta_u", "number", 0.1))
            params["onset"] = tbl.get("onset", "int", 1)
        elif mode == "injection":
            params["goal"] = _goal(tbl, ("overshoot_pct", "steady_state_error"))
            params["stream"] = _stream(tbl)
            params["search"] = tbl.get("search", "str", "both")
            if params["search"] not in ("both", "gain", "bias"):
                raise SchemaError("attack.search: expected 'both', 'gain' or 'bias'")
            window = tbl.get("window", "list", [0, config.horizon - 1])
            if len(window) != 2 or window[0] > window[1]:
                raise SchemaError("attack.window: expected [start, end] with start <= end")
            params["window"] = tuple(window)
            params["gain_bounds"] = tuple(tbl.get("gain_bounds", "list", [0.0, 3.0]))
            bias = tbl.get("bias_bounds", "list", None)
            params["bias_bounds"] = tuple(bias) if bias is not None else None
            params["tolerance"] = tbl.get("tolerance", "number", None)
            params["design"] = _design_optimizer(tbl, (20, 60), config.seed)
        else:
            raise SchemaError(f"attack.mode: expected 'injection' or 'covert', got {mode!r}")
    elif cls in _DROPPING:
        _identification_params(tbl, config, params, needs_cpi)
        params["goal"] = _goal(tbl, ("overshoot_pct", "trajectory"))
        params["drop_horizon"] = tbl.get("drop_horizon", "int", 12)
        streams = [Stream.parse(s) for s in tbl.get("streams", "list", ["forward"])]
        params["streams"] = tuple(streams)
        if params["drop_horizon"] * len(streams) > DROP_SEARCH_CAP:
            raise SchemaError(f"attack.drop_horizon: {params['drop_horizon'] * len(streams)} mask bits exceed the cap of {DROP_SEARCH_CAP}")
        if params["drop_horizon"] > config.horizon:
            raise SchemaError("attack.drop_horizon: longer than the scenario horizon")
        params["max_drops"] = tbl.get("max_drops", "int", None)
        params["drop_penalty"] = float(tbl.get("drop_penalty", "number", 0.0))
        params["design"] = _design_optimizer(tbl, (30, 300), config.seed)
    else:
        raise SchemaError(f"attack.class: no designer is available for {cls.value}")
    tbl.finish()

    spec = AttackSpec(cls, params)
    missing = check_requirements(spec, config.capabilities)
    if missing:
        raise CapabilityMissing({c.value for c in missing}, cls.value)
    for stage in needs_cpi:
        missing = _CPI_NEEDS - config.capabilities
        if missing:
            raise CapabilityMissing({c.value for c in missing}, f"{cls.value} ({stage} stage)")
    return spec


# -- running -----------------------------------------------------------------


@dataclass
class RunReport:
    scenario: str
    seed: int
    attack_class: Optional[str]
    baseline: Optional[StepMetrics]
    attacked: Optional[StepMetrics]
    stealth: dict
    drops_applied: int = 0
    injections_applied: int = 0
    identification: dict = field(default_factory=dict)
    attack_details: dict = field(default_factory=dict)
    diverged: bool = False
    wall_clock_s: float = 0.0
    artifacts: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        """The persisted record; wall-clock time is left out to keep it reproducible."""
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "attack_class": self.attack_class,
            "baseline_metrics": self.baseline.to_dict() if self.baseline else None,
            "attacked_metrics": self.attacked.to_dict() if self.attacked else None,
            "stealth": self.stealth,
            "drops_applied": self.drops_applied,
            "injections_applied": self.injections_applied,
            "identification": self.identification,
            "attack": self.attack_details,
            "diverged": self.diverged,
            "artifacts": self.artifacts,
        }


def _metrics(config, trace) -> Optional[StepMetrics]:
    if trace.diverged:
        return None
    return step_metrics(trace.plant_output, config.reference_value)


def _identify(config: ScenarioConfig, baseline: LoopTrace) -> dict:
    p = config.attack.parameters
    method = p["identification"]
    if method == "exact":
        return {
            "plant": LearnedModel(config.plant, 0.0, "exact"),
            "controller": LearnedModel(config.initial_controller(), 0.0, "exact"),
        }
    (n_p, m_p), (n_c, m_c) = p["plant_orders"], p["controller_orders"]
    if method == "PSI":
        lo, hi = p["observe"]
        u, y = eavesdrop(baseline, Stream.FORWARD)
        e, c = eavesdrop(baseline, Stream.FEEDBACK)
        plant = psi_identify(u[lo:hi], y[lo:hi], n_p, m_p, config.algorithm, config.optimizer,
                             sample_period=config.plant.sample_period)
        controller = psi_identify(e[lo:hi], c[lo:hi], n_c, m_c, config.algorithm, config.optimizer,
                                  sample_period=config.controller.sample_period)
        return {"plant": plant, "controller": controller}
    handle = config.loop_handle()
    probe = _probe(config)
    kwargs = dict(optimizer=config.algorithm, config=config.optimizer, window=p["window"])
    plant = asi_identify(handle, probe, n_p, m_p, target="plant", **kwargs)
    controller = asi_identify(handle, probe, n_c, m_c, target="controller", **kwargs)
    return {"plant": plant, "controller": controller}


def _probe(config) -> AttackSignal:
    p = config.attack.parameters
    return impulse_probe(config.reference_value, p["injection_step"], p["probe_stream"], p["probe_fraction"])


def _execute(config: ScenarioConfig, models: Optional[dict], stage: str):
    """Return ``(baseline, attacked, models, details)``."""
    baseline = config.run_loop()
    attack = config.attack
    if attack is None or stage == "baseline":
        return baseline, baseline, {}, {}
    cls, p = attack.attack_class, attack.parameters
    details = {}

    if cls is AttackClass.EAVESDROP:
        details["stream"] = p["stream"].value
        return baseline, baseline, {}, details
    if cls is AttackClass.PSI:
        return baseline, baseline, _identify(config, baseline), details
    if cls is AttackClass.ASI:
        probe = _probe(config)
        models = _identify(config, baseline)
        details["probe"] = {"samples": list(probe.samples), "injection_step": probe.injection_step,
                            "stream": probe.stream.value}
        attacked = config.run_loop(mitm=ProbeInjector(probe))
        return baseline, attacked, models, details
    if cls is AttackClass.DOS_ARB_JITTER:
        attacked = config.run_loop(faults=[Jitter(p["stream"], p["delays"])])
        return baseline, attacked, {}, {"delays": {str(k): v for k, v in sorted(p["delays"].items())}}
    if cls is AttackClass.DOS_ARB_LOSS:
        fault = Loss(p["stream"], frozenset(p["mask"]), p["probability"], p["loss_seed"])
        return baseline, config.run_loop(faults=[fault]), {}, {"mask": list(p["mask"]), "probability": p["probability"]}
    if cls is AttackClass.DOS_ARB_INJECT:
        attacked = config.run_loop(faults=[Inject(p["stream"], p["overrides"])])
        return baseline, attacked, {}, {"overrides": {str(k): v for k, v in sorted(p["overrides"].items())}}

    # controlled classes: learn the models, then design against them
    if models is None:
        models = _identify(config, baseline)
    if stage == "identify":
        return baseline, baseline, models, details
    reference = config.reference_series()

    if cls in _INJECTING and p["mode"] == "covert":
        onset, du = p["onset"], p["delta_u"] * abs(config.reference_value)
        mitm = CovertMitm(models["plant"], lambda k: du if k >= onset else 0.0)
        details.update({"mode": "covert", "delta_u": du, "onset": onset})
        return baseline, config.run_loop(mitm=mitm), models, details

    if cls in _INJECTING:
        opt_cfg, algorithm = p["design"]
        design = design_sdcdi(
            models["controller"], models["plant"], p["goal"], reference, config.horizon,
            optimizer=algorithm, config=opt_cfg, stream=p["stream"], window=p["window"],
            search=p["search"], gain_bounds=p["gain_bounds"], bias_bounds=p["bias_bounds"],
            tolerance=p["tolerance"],
        )
        details.update({
            "mode": "injection",
            "goal": _goal_dict(p["goal"]),
            "injection": design.injection.to_dict(),
            "predicted_metrics": design.predicted.to_dict(),
        })
        return baseline, config.run_loop(mitm=InjectionMitm(design.injection)), models, details

    opt_cfg, algorithm = p["design"]
    plan = optimize_drop_sequence(
        models["controller"], models["plant"], reference, p["drop_horizon"], p["goal"],
        max_drops=p["max_drops"], drop_penalty=p["drop_penalty"], optimizer=algorithm,
        config=opt_cfg, streams=p["streams"],
    )
    details.update({
        "goal": _goal_dict(p["goal"]),
        "drop_mask": plan.mask.to_dict(),
        "fitness": plan.fitness,
        "deviation": plan.deviation,
        "predicted_metrics": plan.predicted.to_dict() if plan.predicted else None,
    })
    return baseline, config.run_loop(faults=plan.mask.faults()), models, details


def _goal_dict(goal) -> dict:
    if isinstance(goal, Overshoot):
        return {"overshoot_pct": goal.target_pct}
    if isinstance(goal, SteadyStateError):
        return {"steady_state_error": goal.target}
    return {"trajectory": list(goal.series)}


def _write_trace(path: Path, trace: LoopTrace, residual: np.ndarray):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for k in range(len(trace)):
            w.writerow([
                k,
                repr(float(trace.reference[k])),
                repr(float(trace.control_sent[k])),
                repr(float(trace.control_delivered[k])),
                repr(float(trace.plant_output[k])),
                repr(float(trace.feedback_delivered[k])),
                repr(float(residual[k])),
            ])


def _write_packets(path: Path, trace: LoopTrace):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PACKET_COLUMNS)
        for p in trace.packets:
            w.writerow([p.seq, p.k, p.stream.value, repr(float(p.value)), p.delay, int(p.dropped), int(p.tampered)])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def load_models(path) -> dict:
    """Read a ``models.json`` record into ``{"plant": LearnedModel, "controller": LearnedModel}``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read model file ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        return {role: LearnedModel.from_dict(data[role]) for role in ("plant", "controller")}
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: model record needs 'plant' and 'controller' entries ({exc})") from exc


def run(config: ScenarioConfig, out_dir=None, models: Optional[dict] = None, stage: str = "all") -> RunReport:
    """Execute a scenario and write its artifacts.

    ``stage`` is ``"all"``, or ``"identify"`` to stop after the
    intelligence stage.  Passing ``models`` skips identification.  A
    diverged attacked run still writes its artifacts and then raises
    :class:`DivergedResponse`.
    """
    started = time.perf_counter()
    out = Path(out_dir or config.outputs_dir or Path("runs") / config.name)
    out.mkdir(parents=True, exist_ok=True)

    baseline, attacked, models, details = _execute(config, models, stage)

    residual = attacked.feedback_delivered - expected_feedback(config.plant, attacked)
    base_residual = baseline.feedback_delivered - expected_feedback(config.plant, baseline)
    alarms = residual_monitor(expected_feedback(config.plant, attacked), attacked.feedback_delivered, config.threshold)
    stealth = alarms.summary()
    stealth["residual_max_abs"] = float(np.max(np.abs(residual))) if residual.size else 0.0

    artifacts = {"trace": "trace.csv", "baseline": "baseline.csv", "packets": "packets.csv"}
    _write_trace(out / "trace.csv", attacked, residual)
    _write_trace(out / "baseline.csv", baseline, base_residual)
    _write_packets(out / "packets.csv", attacked)
    identification = {}
    if models:
        artifacts["models"] = "models.json"
        record = {role: mdl.to_dict() for role, mdl in sorted(models.items())}
        (out / "models.json").write_text(json.dumps(_json_safe(record), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        identification = {
            role: {"num": list(mdl.tf.num), "den": list(mdl.tf.den), "fit_error": mdl.fit_error, "method": mdl.method}
            for role, mdl in sorted(models.items())
        }

    rpt = RunReport(
        scenario=config.name,
        seed=config.seed,
        attack_class=config.attack.attack_class.value if config.attack else None,
        baseline=_metrics(config, baseline),
        attacked=_metrics(config, attacked),
        stealth=stealth,
        drops_applied=len(attacked.dropped()),
        injections_applied=len(attacked.tampered()),
        identification=identification,
        attack_details=details,
        diverged=attacked.diverged,
        artifacts=artifacts,
    )
    record = _json_safe(rpt.to_record())
    (out / "report.jsonl").write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
    rpt.wall_clock_s = time.perf_counter() - started
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": rpt.wall_clock_s}) + "\n", encoding="utf-8")
    if attacked.diverged:
        raise DivergedResponse(f"{config.name}: plant output diverged at step {len(attacked) - 1}", partial=attacked)
    return rpt


# -- reporting ---------------------------------------------------------------


def _read_record(run_dir: Path) -> dict:
    path = run_dir / "report.jsonl"
    if not path.is_file():
        raise MissingArtifact(f"{run_dir}: no report.jsonl found; run the scenario first")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise MissingArtifact(f"{path}: empty report log")
    return json.loads(lines[-1])


def _fmt_metrics(m: Optional[dict]) -> str:
    if m is None:
        return "diverged"
    settle = "not settled" if m["settling_time"] is None else f"settles at step {m['settling_time']}"
    return f"overshoot {m['overshoot_pct']:.1f}%, {settle}, steady-state error {m['steady_state_error']:.4g}"


def report(run_dir, plot_dir=None) -> str:
    """Human-readable summary of a finished run; optionally dump x/y plot files.

    Reads only the artifacts written by :func:`run`.
    """
    run_dir = Path(run_dir)
    record = _read_record(run_dir)
    trace_path = run_dir / record["artifacts"]["trace"]
    if not trace_path.is_file():
        raise MissingArtifact(f"{trace_path}: trace artifact is missing")

    stealth = record["stealth"]
    alarm_text = "no alarms" if not stealth["tripped"] else (
        f"{stealth['alarms']} alarms (first at step {stealth['first_alarm']})"
    )
    attacked = record["attacked_metrics"]
    headline = alarm_text
    if attacked is not None:
        headline += f", overshoot {attacked['overshoot_pct']:.1f}%"
    lines = [
        f"scenario {record['scenario']} (seed {record['seed']})",
        f"attack: {record['attack_class'] or 'none'}",
        f"result: {headline}",
        f"baseline: {_fmt_metrics(record['baseline_metrics'])}",
        f"attacked: {_fmt_metrics(attacked)}",
        f"monitor: threshold {stealth['threshold']:.4g}, residual max {stealth['residual_max_abs']:.6g}",
        f"drops applied: {record['drops_applied']}, injected packets: {record['injections_applied']}",
    ]
    for role, mdl in sorted(record.get("identification", {}).items()):
        lines.append(f"learned {role} ({mdl['method']}): num={mdl['num']} den={mdl['den']} fit_error={mdl['fit_error']:.3g}")
    attack = record.get("attack", {})
    if "injection" in attack:
        inj = attack["injection"]
        lines.append(f"injection: gain {inj['gain']:.6g}, bias {inj['bias']:.6g} on {inj['stream']} [{inj['start']}, {inj['end']}]")
    if "drop_mask" in attack:
        lines.append(f"drop mask: {attack['drop_mask']['drops']}")
    if record["diverged"]:
        lines.append("attacked run DIVERGED")

    if plot_dir is not None:
        plot_dir = Path(plot_dir)
        plot_dir.mkdir(parents=True, exist_ok=True)
        with trace_path.open(encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for col in CSV_COLUMNS[1:]:
            with (plot_dir / f"{col}.dat").open("w", encoding="utf-8") as out:
                out.write(f"# k {col}\n")
                for row in rows:
                    out.write(f"{row['k']} {row[col]}\n")
        lines.append(f"plot data: {plot_dir}")
    return "\n".join(lines)
