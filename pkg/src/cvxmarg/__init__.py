"""Learned convex inference of univariate marginals.

Inference minimizes a weighted sum of convex functions of locally
consistent pseudomarginals; learning fits the weights by empirical risk
minimization, differentiating through the minimizer implicitly.
"""

__version__ = "0.1.0"

__all__ = [
    "ConstraintSystem", "InferenceResult", "ParameterSet", "Region", "RegionGraph", "Sample",
    "SensitivitySolver", "TrainConfig", "adjoint_loss_gradient", "bethe_counting_numbers",
    "build_chain_model", "build_constraints", "build_grid_model", "consistency_residual",
    "dbeliefs_dtheta", "dweights_dtheta", "empirical_risk", "evaluate", "infer", "init_parameters",
    "load_model", "realize_weights", "save_model", "train", "uniform_beliefs",
]

from .model import (  # noqa: E402
    ParameterSet,
    Region,
    RegionGraph,
    bethe_counting_numbers,
    build_chain_model,
    build_grid_model,
    dweights_dtheta,
    load_model,
    realize_weights,
    save_model,
)
from .polytope import ConstraintSystem, build_constraints, consistency_residual, uniform_beliefs  # noqa: E402
from .solver import InferenceResult, infer  # noqa: E402
from .sensitivity import SensitivitySolver, adjoint_loss_gradient, dbeliefs_dtheta  # noqa: E402
from .loss import Sample, empirical_risk  # noqa: E402
from .trainer import TrainConfig, evaluate, init_parameters, train  # noqa: E402
