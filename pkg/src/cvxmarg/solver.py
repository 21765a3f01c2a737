"""Equality-constrained Newton minimization of F over the local polytope.

The start point is the uniform belief vector, which is feasible and
interior. Each iteration solves the KKT system by a Schur complement on
``A D^-1 A^T`` and backtracks on the KKT residual norm under a
fraction-to-boundary cap. The entropy term's unbounded slope at zero keeps
iterates away from the boundary without explicit inequality handling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidArgument, NumericalFailure
from .functions import FAMILY
from .model import ParameterSet, RegionGraph, realize_weights
from .objective import eval_F, grad_F, hess_diag
from .polytope import ConstraintSystem, uniform_beliefs

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 200
BOUNDARY_FRACTION = 0.99
_ARMIJO = 1e-4
_MIN_STEP = 1e-12


class SchurFactor:
    """Cholesky factorization of the symmetric positive definite ``A diag(dinv) A^T``.

    Small systems are factored densely. Larger ones use a banded Cholesky
    after a reverse Cuthill-McKee reordering, which suits grid structure.
    """

    def __init__(self, system: ConstraintSystem, dinv: np.ndarray):
        self._dense = system.dense_kernels
        try:
            if self._dense:
                self._cho = scipy.linalg.cho_factor(system.schur(dinv), lower=True, check_finite=True)
            else:
                ab, self._perm = system.schur_band(dinv)
                self._band = scipy.linalg.cholesky_banded(ab, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalFailure(f"Schur complement factorization failed: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._dense:
            out = scipy.linalg.cho_solve(self._cho, rhs)
        else:
            out = np.empty_like(rhs, dtype=float)
            out[self._perm] = scipy.linalg.cho_solve_banded((self._band, True), rhs[self._perm])
        if not np.all(np.isfinite(out)):
            raise NumericalFailure("Schur complement solve produced non-finite values")
        return out


@dataclass(frozen=True)
class InferenceResult:
    beliefs: np.ndarray
    multipliers: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool
    weights: np.ndarray
    tol: float


def kkt_residual_vector(b, lam, grad, system: ConstraintSystem) -> np.ndarray:
    return np.concatenate([grad + system.rmatvec(lam), system.matvec(b) - system.d])


def kkt_step(b, lam, grad, D, system: ConstraintSystem) -> tuple[np.ndarray, np.ndarray]:
    """Newton step for the saddle system ``[D A^T; A 0]``.

    Solves ``D db + A^T dlam = -(grad + A^T lam)`` and ``A db = d - A b``
    via the Schur complement ``(A D^-1 A^T) dlam = A D^-1 r1 - r2``.
    """
    D = np.asarray(D, dtype=np.float64)
    if not np.all(D > 0):
        raise NumericalFailure("Hessian diagonal must be strictly positive")
    dinv = 1.0 / D
    r1 = -(grad + system.rmatvec(lam))
    r2 = system.d - system.matvec(b)
    dlam = SchurFactor(system, dinv).solve(system.matvec(dinv * r1) - r2)
    db = dinv * (r1 - system.rmatvec(dlam))
    return db, dlam


def _max_step(b: np.ndarray, db: np.ndarray) -> float:
    neg = db < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, BOUNDARY_FRACTION * float(np.min(b[neg] / -db[neg])))


def minimize_beliefs(
    w: np.ndarray,
    system: ConstraintSystem,
    b0: np.ndarray,
    family=None,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> InferenceResult:
    """Minimize ``sum_f w_f . f(b)`` subject to ``A b = d`` from a feasible interior ``b0``."""
    family = FAMILY if family is None else family
    if tol <= 0:
        raise InvalidArgument("tol must be positive")
    b = np.array(b0, dtype=np.float64)
    lam = np.zeros(system.shape[0])
    g = grad_F(b, w, family)
    r = kkt_residual_vector(b, lam, g, system)
    F = eval_F(b, w, family)
    best = (float(np.max(np.abs(r))), b, lam)
    it = 0
    while True:
        res = float(np.max(np.abs(r))) if r.size else 0.0
        if res < best[0]:
            best = (res, b, lam)
        if res <= tol:
            return InferenceResult(b, lam, res, it, True, w, tol)
        if it >= max_iters:
            break
        D = hess_diag(b, w, family)
        db, dlam = kkt_step(b, lam, g, D, system)
        alpha = _max_step(b, db)
        norm0 = float(np.linalg.norm(r))
        slack = 1e-13 * max(1.0, abs(F))
        accepted = False
        while alpha >= _MIN_STEP:
            bn = b + alpha * db
            if np.all(bn > 0):
                ln = lam + alpha * dlam
                gn = grad_F(bn, w, family)
                rn = kkt_residual_vector(bn, ln, gn, system)
                Fn = eval_F(bn, w, family)
                if np.linalg.norm(rn) <= (1.0 - _ARMIJO * alpha) * norm0 and Fn <= F + slack:
                    accepted = True
                    break
            alpha *= 0.5
        it += 1
        if not accepted:
            break
        b, lam, g, r, F = bn, ln, gn, rn, Fn
    res, b, lam = best
    return InferenceResult(b, lam, res, it, False, w, tol)


def infer(
    graph: RegionGraph,
    params: ParameterSet,
    system: ConstraintSystem,
    y,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> InferenceResult:
    """Locally consistent beliefs minimizing F for observation ``y``.

    A result with ``converged=False`` carries the best iterate seen.
    """
    w = realize_weights(graph, params, y)
    return minimize_beliefs(w, system, uniform_beliefs(graph), params.family, tol, max_iters)
