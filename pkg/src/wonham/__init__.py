"""Wonham filter stability: controllability analysis, filtering and Monte Carlo checks."""
from importlib.metadata import PackageNotFoundError, version

from .analysis import (
    StabilizabilityReport,
    SubspaceBasis,
    carre_du_champ,
    controllable_subspace,
    membership,
    stabilizability,
)
from .dual import (
    ControlSignal,
    duality_check,
    estimator_value,
    pathwise_cost,
    solve_backward_ode,
    value_identity_check,
)
from .estimators import StabilizabilityAnalyzer, WonhamFilter
from .experiments import (
    ExperimentConfig,
    run_detection,
    run_martingale_check,
    run_monotonicity,
    run_necessity_demo,
    run_splitting_check,
    run_stability,
)
from .filter import filter_batch, run_wonham, transition_matrix
from .model import (
    HmmModel,
    ergodic_decomposition,
    invariant_measure,
    load_model,
    validate_model,
)
from .paths import RngStream, simulate_batch, simulate_trial

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

__all__ = [
    "ControlSignal", "ExperimentConfig", "HmmModel", "RngStream", "StabilizabilityAnalyzer",
    "StabilizabilityReport", "SubspaceBasis", "WonhamFilter", "carre_du_champ",
    "controllable_subspace", "duality_check", "ergodic_decomposition", "estimator_value",
    "filter_batch", "invariant_measure", "load_model", "membership", "pathwise_cost",
    "run_detection", "run_martingale_check", "run_monotonicity", "run_necessity_demo",
    "run_splitting_check", "run_stability", "run_wonham", "simulate_batch", "simulate_trial",
    "solve_backward_ode", "stabilizability", "transition_matrix", "validate_model",
    "value_identity_check",
]
