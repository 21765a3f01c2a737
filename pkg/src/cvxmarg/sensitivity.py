"""Derivatives of the constrained minimizer with respect to the parameters.

At a KKT point the belief Jacobian column for ``theta[j]`` is ``-X c_j``
with ``X = D^-1 - D^-1 A^T (A D^-1 A^T)^-1 A D^-1`` and ``c_j`` the mixed
second derivative of F. ``X`` is symmetric, so a scalar loss needs a
single application ``g = X dL/db`` and then ``dL/dtheta_j = -c_j . g``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidState
from .functions import FAMILY
from .model import ParameterSet, RegionGraph
from .objective import cross_derivative, hess_diag
from .polytope import ConstraintSystem
from .solver import InferenceResult, SchurFactor


class SensitivitySolver:
    """Applies ``X`` at one inference result without forming it."""

    def __init__(self, result: InferenceResult, system: ConstraintSystem, family=None):
        if not result.converged:
            raise InvalidState("sensitivities need a converged inference result")
        self.system = system
        self.D = hess_diag(result.beliefs, result.weights, family or FAMILY)
        self.dinv = 1.0 / self.D
        self.factor = SchurFactor(system, self.dinv)

    def apply_Z(self, v: np.ndarray) -> np.ndarray:
        """Lower-left block of the inverse KKT matrix applied to ``v``."""
        return self.factor.solve(self.system.matvec(self.dinv * v))

    def apply_X(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        s = self.apply_Z(v)
        return self.dinv * (v - self.system.rmatvec(s))


def apply_X(solver: SensitivitySolver, v) -> np.ndarray:
    return solver.apply_X(v)


def dbeliefs_dtheta(
    result: InferenceResult,
    graph: RegionGraph,
    params: ParameterSet,
    system: ConstraintSystem,
    y,
    j: int,
    solver: SensitivitySolver | None = None,
) -> np.ndarray:
    solver = solver or SensitivitySolver(result, system, params.family)
    return -solver.apply_X(cross_derivative(result.beliefs, graph, params, y, j))


def belief_jacobian(result, graph, params, system, y) -> np.ndarray:
    """All belief sensitivities, one row per parameter (one solve each)."""
    solver = SensitivitySolver(result, system, params.family)
    return np.stack(
        [dbeliefs_dtheta(result, graph, params, system, y, j, solver) for j in range(params.layout.size)]
    )


def adjoint_loss_gradient(
    result: InferenceResult,
    graph: RegionGraph,
    params: ParameterSet,
    system: ConstraintSystem,
    y,
    dL_db,
    solver: SensitivitySolver | None = None,
) -> np.ndarray:
    """Gradient of a belief-level loss over every parameter with one ``X`` application."""
    solver = solver or SensitivitySolver(result, system, params.family)
    g = solver.apply_X(np.asarray(dL_db, dtype=np.float64))
    b = result.beliefs
    cell = graph.cell_index(y)
    n = params.layout.block_size
    grad = np.zeros(params.layout.size)
    for k, f in enumerate(params.family):
        # dw/dtheta is 1 for plain weights and w itself for log-weights.
        scale = result.weights[k] if f.positive else 1.0
        grad[k * n : (k + 1) * n] = -np.bincount(cell, weights=scale * f.d1(b) * g, minlength=n)
    return grad
