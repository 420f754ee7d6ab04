"""Simulation and attack toolkit for networked discrete-time control loops."""

from .errors import *  # noqa: F401,F403
from .lti import (
    DC_MOTOR_SURROGATE,
    UNDERDAMPED_SURROGATE,
    SimState,
    StepMetrics,
    TransferFunction,
    closed_loop_response,
    make_pi_controller,
    simulate,
    step_metrics,
    tf_step,
)
from .netloop import Inject, Jitter, LoopTrace, Loss, MitmHandler, PacketEvent, Stream, eavesdrop, run_loop
from .optimizers import CandidateSolution, OptimizerConfig, bsa_minimize, minimize, pso_minimize
from .cpi import AttackSignal, LearnedModel, LoopHandle, asi_identify, denoise, excitation_score, psi_identify, refine
from .modelbased import (
    AttackClass,
    AttackSpec,
    Capability,
    CovertMitm,
    DropMask,
    InjectionFunction,
    Overshoot,
    SteadyStateError,
    TargetTrajectory,
    check_requirements,
    covert_mitm_step,
    design_sdcdi,
    optimize_drop_sequence,
)
from .defense import AlarmLog, SwitchSchedule, apply_switching_defense, residual_monitor
from .scenario import RunReport, ScenarioConfig, load_scenario, report, run

__version__ = "0.1.0"
