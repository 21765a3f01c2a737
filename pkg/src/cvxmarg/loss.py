"""Univariate-marginal losses, their belief gradients and the empirical risk."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalFailure
from .model import ParameterSet, RegionGraph
from .polytope import ConstraintSystem
from .sensitivity import SensitivitySolver, adjoint_loss_gradient
from .solver import DEFAULT_TOL, infer

HIDDEN = -1
LOSS_KINDS = ("log", "quad")


@dataclass(frozen=True)
class Sample:
    """One training pair.

    ``hidden`` holds a state per hidden variable, or ``HIDDEN`` where the
    true state is unknown. ``mask`` selects the variables that enter the
    loss; by default every variable with a known state.
    """

    hidden: np.ndarray
    observed: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        hidden = np.asarray(self.hidden, dtype=np.int64).reshape(-1)
        observed = np.asarray(self.observed, dtype=np.int64).reshape(-1)
        mask = hidden != HIDDEN if self.mask is None else np.asarray(self.mask, dtype=bool).reshape(-1)
        if mask.shape != hidden.shape:
            raise InvalidArgument("mask and hidden assignment differ in length")
        if np.any(mask & (hidden == HIDDEN)):
            raise InvalidArgument("mask includes a variable without a known state")
        for name, arr in (("hidden", hidden), ("observed", observed), ("mask", mask)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def _singleton_table(graph: RegionGraph, b: np.ndarray) -> np.ndarray:
    """Belief table (num_hidden, arity) gathered from the singleton blocks."""
    starts = np.array([graph.offsets[graph.singleton_of[i]] for i in range(graph.num_hidden)])
    return b[starts[:, None] + np.arange(graph.hidden_arity)]


def _check(graph: RegionGraph, sample: Sample) -> np.ndarray:
    if sample.hidden.size != graph.num_hidden:
        raise InvalidArgument(f"sample has {sample.hidden.size} hidden entries, graph has {graph.num_hidden}")
    idx = np.flatnonzero(sample.mask)
    if np.any(sample.hidden[idx] < 0) or np.any(sample.hidden[idx] >= graph.hidden_arity):
        raise InvalidArgument("masked hidden state out of range")
    return idx


def log_loss(graph: RegionGraph, b, sample: Sample) -> float:
    idx = _check(graph, sample)
    table = _singleton_table(graph, np.asarray(b, dtype=np.float64))
    p = table[idx, sample.hidden[idx]]
    if np.any(p <= 0):
        raise InvalidArgument("log-loss needs positive beliefs on the true states")
    return float(-np.sum(np.log(p)))


def quad_loss(graph: RegionGraph, b, sample: Sample) -> float:
    idx = _check(graph, sample)
    table = _singleton_table(graph, np.asarray(b, dtype=np.float64))[idx]
    return float(np.sum(-2.0 * table[np.arange(idx.size), sample.hidden[idx]] + np.sum(table**2, axis=1)))


def loss(kind: str, graph: RegionGraph, b, sample: Sample) -> float:
    if kind == "log":
        return log_loss(graph, b, sample)
    if kind == "quad":
        return quad_loss(graph, b, sample)
    raise InvalidArgument(f"unknown loss kind {kind!r}")


def dloss_dbeliefs(kind: str, graph: RegionGraph, b, sample: Sample) -> np.ndarray:
    """Gradient of the loss in the flat belief vector; zero on clique blocks."""
    if kind not in LOSS_KINDS:
        raise InvalidArgument(f"unknown loss kind {kind!r}")
    b = np.asarray(b, dtype=np.float64)
    idx = _check(graph, sample)
    ha = graph.hidden_arity
    starts = np.array([graph.offsets[graph.singleton_of[i]] for i in idx], dtype=np.int64)
    truth = sample.hidden[idx]
    out = np.zeros_like(b)
    if kind == "log":
        out[starts + truth] = -1.0 / b[starts + truth]
    else:
        pos = starts[:, None] + np.arange(ha)
        onehot = (np.arange(ha)[None, :] == truth[:, None]).astype(np.float64)
        out[pos] = 2.0 * (b[pos] - onehot)
    return out


def _group_term(args):
    members, graph, params, system, kind, tol, with_grad = args
    i = members[0][0]
    try:
        res = infer(graph, params, system, members[0][1].observed, tol=tol)
    except NumericalFailure as exc:
        raise NumericalFailure(f"inference for sample {i} failed: {exc}") from exc
    if not res.converged:
        raise NumericalFailure(
            f"inference for sample {i} did not converge (KKT residual {res.kkt_residual:.3e} "
            f"after {res.iterations} iterations)"
        )
    value = 0.0
    for _, sample in members:
        value += loss(kind, graph, res.beliefs, sample)
    if not with_grad:
        return value, None
    dl = np.zeros_like(res.beliefs)
    for _, sample in members:
        dl += dloss_dbeliefs(kind, graph, res.beliefs, sample)
    solver = SensitivitySolver(res, system, params.family)
    return value, adjoint_loss_gradient(res, graph, params, system, members[0][1].observed, dl, solver)


def _group_by_observation(dataset) -> list[list]:
    groups: dict[bytes, list] = {}
    for i, sample in enumerate(dataset):
        key = np.ascontiguousarray(sample.observed, dtype=np.int64).tobytes()
        groups.setdefault(key, []).append((i, sample))
    return list(groups.values())


def empirical_risk(
    dataset,
    graph: RegionGraph,
    params: ParameterSet,
    system: ConstraintSystem,
    kind: str,
    tol: float = DEFAULT_TOL,
    workers: int = 1,
    with_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    """Summed loss over the dataset and its gradient over ``theta``.

    Samples sharing an observation share one inference and one adjoint
    solve. Groups are independent; with ``workers > 1`` they are spread
    over a thread pool, but terms are always added in first-occurrence
    order so the result does not depend on the worker count.
    """
    if kind not in LOSS_KINDS:
        raise InvalidArgument(f"unknown loss kind {kind!r}")
    if len(dataset) == 0:
        raise InvalidArgument("empty dataset")
    jobs = [(m, graph, params, system, kind, tol, with_grad) for m in _group_by_observation(dataset)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            terms = list(pool.map(_group_term, jobs))
    else:
        terms = [_group_term(job) for job in jobs]
    risk = 0.0
    grad = np.zeros(params.layout.size) if with_grad else None
    for value, g in terms:
        risk += value
        if with_grad:
            grad += g
    return risk, grad
