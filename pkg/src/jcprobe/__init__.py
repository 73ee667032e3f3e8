"""Continuous weak monitoring of a resonant qubit-oscillator system.

A dense-matrix simulator for a harmonic oscillator resonantly coupled to a
qubit whose excited-state population is monitored continuously.  The package
provides the operator algebra, conditioned (stochastic) and unconditioned
master-equation integrators, record synthesis and filtering, ensemble
statistics, and a command-line front end.
"""

from jcprobe.algebra import (
    IntegrationDivergenceError,
    dagger,
    enforce_hygiene,
    expectation,
    kron,
    purity,
    trace_distance,
)
from jcprobe.model import (
    ModelConfig,
    SubspaceDecomposition,
    annihilation,
    build_hamiltonian,
    initial_joint_state,
    qubit_sigma,
    subspace_decomposition,
    thermal_leakage,
    thermal_state,
    total_excitation,
)
from jcprobe.sme import (
    GridMismatchError,
    PositivityError,
    SimulationConfig,
    TrajectoryRecord,
    TruncationError,
    apply_jump,
    dissipator,
    drift,
    extract_innovation,
    info_gain,
    kraus_step,
    run_ensemble,
    run_filter,
    run_generator,
    run_unconditional,
    step,
    synthesize_record,
)
from jcprobe.analysis import (
    EnsembleSummary,
    FitDegenerateError,
    PurityFit,
    aggregate,
    collapse_metrics,
    fit_purity,
    jump_detection,
    reduced_dynamics_oracle,
    sweep_tau,
)

__version__ = "0.1.0"
