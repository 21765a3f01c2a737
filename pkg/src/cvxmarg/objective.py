"""The convex inference objective and its derivatives.

``w`` is always a 2-d array with one row per convex function, as returned
by :func:`cvxmarg.model.realize_weights`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DomainError, InvalidArgument, NumericalFailure, SingularHessian
from .functions import FAMILY, ConvexFunction
from .model import ParameterSet, RegionGraph, dweights_dtheta


def _check(b, w, family) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape != (len(family), b.size):
        raise InvalidArgument(f"weights have shape {w.shape}, expected {(len(family), b.size)}")
    if not np.all(b > 0):
        raise DomainError(f"beliefs must be strictly positive (min {b.min():.3e})")
    return b, w


def eval_F(b, w, family: Sequence[ConvexFunction] = FAMILY) -> float:
    b, w = _check(b, w, family)
    return float(sum(w[k] @ f.value(b) for k, f in enumerate(family)))


def grad_F(b, w, family: Sequence[ConvexFunction] = FAMILY) -> np.ndarray:
    b, w = _check(b, w, family)
    out = np.zeros_like(b)
    for k, f in enumerate(family):
        out += w[k] * f.d1(b)
    return out


def hess_diag(b, w, family: Sequence[ConvexFunction] = FAMILY) -> np.ndarray:
    """Diagonal of the belief Hessian; raises if any entry is not positive."""
    b, w = _check(b, w, family)
    D = np.zeros_like(b)
    with np.errstate(over="ignore", divide="ignore"):
        for k, f in enumerate(family):
            D += w[k] * f.d2(b)
    if not np.all(np.isfinite(D)):
        raise NumericalFailure("Hessian overflow; beliefs have underflowed")
    if not np.all(D > 0):
        bad = int(np.argmin(D))
        raise SingularHessian(f"Hessian entry {bad} is {D[bad]:.3e}; positive-function weights must be > 0")
    return D


def cross_derivative(b, graph: RegionGraph, params: ParameterSet, y, j: int) -> np.ndarray:
    """Mixed derivative of F in the beliefs and ``theta[j]``."""
    b = np.asarray(b, dtype=np.float64)
    if not np.all(b > 0):
        raise DomainError("beliefs must be strictly positive")
    dw = dweights_dtheta(graph, params, y, j)
    out = np.zeros_like(b)
    for k, f in enumerate(params.family):
        nz = dw[k] != 0
        out[nz] += dw[k, nz] * f.d1(b[nz])
    return out
