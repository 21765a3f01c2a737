"""Brute-force reference computations used by tests and self-checks.

Nothing here reuses the flattened belief indexing of the main path:
joints are dense tensors indexed by explicit variable assignments.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NumericalFailure
from .solver import infer

MAX_JOINT_STATES = 2**20


@dataclass(frozen=True)
class EnergyTableModel:
    """``p(x | y) ∝ exp(sum_c E_c(x_c, y_c))`` over enumerable hidden states.

    Each clique is ``(hidden_vars, observed_vars, table)`` where ``table``
    has one axis per hidden variable followed by one per observed variable.
    """

    num_hidden: int
    hidden_arity: int
    cliques: tuple

    def __post_init__(self):
        if self.hidden_arity**self.num_hidden > MAX_JOINT_STATES:
            raise InvalidArgument(
                f"joint state space {self.hidden_arity}**{self.num_hidden} exceeds {MAX_JOINT_STATES}"
            )


def log_potential(model: EnergyTableModel, x, y) -> float:
    total = 0.0
    for hvars, ovars, table in model.cliques:
        key = tuple(int(x[v]) for v in hvars) + tuple(int(y[v]) for v in ovars)
        total += float(np.asarray(table)[key])
    return total


def joint_conditional(model: EnergyTableModel, y, reverse: bool = False) -> np.ndarray:
    """Dense tensor ``p(x | y)`` with one axis per hidden variable."""
    p = np.zeros((model.hidden_arity,) * model.num_hidden)
    states = list(itertools.product(range(model.hidden_arity), repeat=model.num_hidden))
    if reverse:
        states.reverse()
    logs = np.array([log_potential(model, x, y) for x in states])
    weights = np.exp(logs - logs.max())
    for x, wt in zip(states, weights):
        p[x] = wt
    return p / p.sum()


def brute_force_conditional_marginals(model: EnergyTableModel, y, reverse: bool = False) -> np.ndarray:
    """Exact ``p(x_i | y)`` as a (num_hidden, arity) array."""
    p = joint_conditional(model, y, reverse)
    axes = range(model.num_hidden)
    return np.stack([p.sum(axis=tuple(a for a in axes if a != i)) for i in axes])


def finite_diff_belief_jacobian(graph, params, system, y, h: float = 1e-5, inner_tol: float = 1e-12):
    """Central differences of the inferred beliefs, one row per parameter."""
    if h <= 0:
        raise InvalidArgument("h must be positive")
    rows = []
    for j in range(params.layout.size):
        cols = []
        for sign in (1.0, -1.0):
            theta = params.theta.copy()
            theta[j] += sign * h
            res = infer(graph, params.with_theta(theta), system, y, tol=inner_tol)
            if not res.converged:
                raise NumericalFailure(f"perturbed inference for parameter {j} did not converge")
            cols.append(res.beliefs)
        rows.append((cols[0] - cols[1]) / (2.0 * h))
    return np.array(rows)


def claim1_toy(theta: float) -> tuple[float, float]:
    """Implicit versus closed-form derivative of ``argmin_b theta*b**2 - b``.

    The minimizer is ``1 / (2 theta)``. The implicit form divides the mixed
    derivative ``2 b*`` by the curvature ``2 theta``.
    """
    b_star = 1.0 / (2.0 * theta)
    implicit = -(2.0 * b_star) / (2.0 * theta)
    closed = -1.0 / (2.0 * theta**2)
    return implicit, closed


def claim1_toy_check(thetas=(0.5, 1.0, 2.0), atol: float = 1e-12) -> bool:
    return all(abs(a - b) <= atol for a, b in map(claim1_toy, thetas))


def stratified_draws(p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` flat-state draws from ``p`` by systematic sampling, shuffled.

    Each draw is marginally distributed as ``p`` while the state counts stay
    within one of ``n * p``.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    cdf = np.cumsum(p / p.sum())
    cdf[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    states = np.searchsorted(cdf, u, side="right")
    return rng.permutation(states)
