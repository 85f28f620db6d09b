"""Simulator for quantum-logic binary subspace measurements on trapped ions."""

from qlsim.atomic import (
    HyperfineLevel,
    HyperfineManifold,
    IonSpec,
    ValidationError,
    ba137,
    breit_rabi_energy,
    build_manifold,
    yb171,
)
from qlsim.dynamics import (
    ErrorModel,
    GateParams,
    SystemState,
    closed_form_gate,
    compose_conditional_rotation,
    gate_params_for,
    integrate_gate,
    shelving_pulse,
    spin_flip_probability,
)
from qlsim.measurement import (
    InvalidSplitError,
    MeasurementRecord,
    Partition,
    measure_readout,
    predict_partition,
    reset_readout,
)
from qlsim.protocol import (
    GateConfig,
    Leaf,
    ProtocolNode,
    ProtocolTree,
    TrialResult,
    analytic_vote_error,
    ba137_init_protocol,
    leakage_check,
    majority_vote,
    plan_bisection,
    run_protocol,
    yb171_init_protocol,
    yb171_readout_protocol,
)
from qlsim.montecarlo import SweepConfig, SweepResult, run_sweep, sample_initial_level

__version__ = "0.1.0"
