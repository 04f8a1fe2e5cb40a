"""Distributed stochastic dual coordinate ascent for L2-regularized loss minimization."""
from .data import (
    Dataset,
    Partition,
    binarize_labels,
    generate_synthetic,
    load_libsvm,
    normalize_unit_ball,
    orthogonality_residual,
    partition,
    save_libsvm,
)
from .diagnostics import (
    BoundParams,
    TraceRecord,
    accumulate_S,
    dual_objective,
    epsilon_fit,
    primal_objective,
    residual_R,
    theorem_bound,
)
from .model import IncrementProblem, LossModel, Regularizer, conjugate_neg, dual_increment, loss_grad, loss_value, primal_from_dual
from .solver import SolverConfig, SolverResult, run_disdca, run_one_communication, run_sdca_reference, run_worker

__version__ = "0.1.0"
