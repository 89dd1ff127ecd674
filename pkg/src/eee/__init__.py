"""Equilibrium learning dynamics for weakly coupled finite stochastic games.

Agents see private signals whose distribution depends on a shared
environment state, keep finite memories of those signals, and best-respond
to models extracted from the long-run behaviour of the coupled chain. The
package builds the exact joint chain, solves for consistent models, runs
greedy and softmax value iteration, certifies contraction and perturbation
bounds in terms of the coupling strength, and validates the exact models
against Monte Carlo rollouts.
"""

from .chain_analysis import (
    ChainDiagnostics,
    ConsistentModel,
    JointTransition,
    StationaryDistribution,
    StationaryError,
    VanishingMassError,
    build_joint_transition,
    chain_diagnostics,
    consistent_model,
    meyer_condition_number,
    model_from_stationary,
    stationary_distribution,
    uniform_strategy,
)
from .coupling_bounds import (
    CouplingReport,
    TheoremBounds,
    compute_bounds,
    contraction_factor,
    coupling_value,
    margin_condition,
    model_perturbation_bound,
    q_stability_bound,
)
from .empirical import (
    ComparisonReport,
    EmpiricalModel,
    Trajectory,
    compare_models,
    empirical_model,
    simulate,
)
from .game_model import (
    AgentSpec,
    ConvexFamily,
    GameSpec,
    JointIndexer,
    ParseError,
    SpecError,
    ValidationReport,
    build_example1,
    example1_path,
    interpolate,
    load_game,
    save_game,
    validate_spec,
)
from .learning import (
    IterationTrace,
    PolicyRule,
    QTable,
    Strategy,
    TerminationReport,
    VerificationReport,
    bellman_update,
    detect_cycle,
    greedy_policy,
    margin,
    max_metric_q,
    max_metric_strategy,
    q_value_iteration,
    softmax_policy,
    solve_q_fixed_point,
    verify_approx_eee,
    verify_eee,
    zeros_q,
)

__version__ = "0.1.0"

__all__ = [
    "AgentSpec",
    "ChainDiagnostics",
    "ComparisonReport",
    "ConsistentModel",
    "ConvexFamily",
    "CouplingReport",
    "EmpiricalModel",
    "GameSpec",
    "IterationTrace",
    "JointIndexer",
    "JointTransition",
    "ParseError",
    "PolicyRule",
    "QTable",
    "SpecError",
    "StationaryDistribution",
    "StationaryError",
    "Strategy",
    "TerminationReport",
    "TheoremBounds",
    "Trajectory",
    "ValidationReport",
    "VanishingMassError",
    "VerificationReport",
    "bellman_update",
    "build_example1",
    "build_joint_transition",
    "chain_diagnostics",
    "compare_models",
    "compute_bounds",
    "consistent_model",
    "contraction_factor",
    "coupling_value",
    "detect_cycle",
    "empirical_model",
    "example1_path",
    "greedy_policy",
    "interpolate",
    "load_game",
    "margin",
    "margin_condition",
    "max_metric_q",
    "max_metric_strategy",
    "meyer_condition_number",
    "model_from_stationary",
    "model_perturbation_bound",
    "q_stability_bound",
    "q_value_iteration",
    "save_game",
    "simulate",
    "softmax_policy",
    "solve_q_fixed_point",
    "stationary_distribution",
    "uniform_strategy",
    "validate_spec",
    "verify_approx_eee",
    "verify_eee",
    "zeros_q",
    "__version__",
]
