"""Outer optimization of the weight tables by limited-memory BFGS.

Training runs two stages. In the ``frozen`` stage only the plain (linear)
weights move while log-weights of positive functions stay at their current
value; the ``full`` stage then releases every parameter.
"""

from __future__ import annotations

import io
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalFailure, TrainingError
from .loss import LOSS_KINDS, _singleton_table, empirical_risk, log_loss, quad_loss
from .model import ParameterSet, RegionGraph
from .polytope import ConstraintSystem
from .solver import DEFAULT_TOL, infer

log = logging.getLogger(__name__)

# Beliefs are only accurate to the inner tolerance; closer values are ties.
TIE_TOL = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "log"
    stage1_iters: int = 100
    stage2_iters: int = 100
    inner_tol: float = DEFAULT_TOL
    memory: int = 10
    grad_tol: float = 1e-6
    seed: int = 0
    workers: int = 1
    armijo: float = 1e-4
    max_backtracks: int = 20

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise InvalidArgument(f"loss must be one of {LOSS_KINDS}")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise InvalidArgument("iteration counts must be >= 0")
        if not self.inner_tol > 0:
            raise InvalidArgument("inner_tol must be positive")
        if self.memory < 1:
            raise InvalidArgument("memory must be >= 1")
        if self.workers < 1:
            raise InvalidArgument("workers must be >= 1")


@dataclass
class TraceRecord:
    iteration: int
    stage: str
    risk: float
    grad_norm: float
    step: float


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("iteration,stage,risk,grad_norm,step\n")
        for r in self.records:
            out.write(f"{r.iteration},{r.stage},{r.risk:.17g},{r.grad_norm:.17g},{r.step:.17g}\n")
        for note in self.notes:
            out.write(f"# {note}\n")
        return out.getvalue()


def init_parameters(graph: RegionGraph) -> ParameterSet:
    """Plain weights 0 and positive-function weights 1 (log-weight 0)."""
    return ParameterSet.zeros(graph)


def _two_loop(g: np.ndarray, S, Y) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(S, Y))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    s, y = S[-1], Y[-1]
    q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        q += (a - rho * (y @ q)) * s
    return q


def _stage(fg, theta, f, g, free, iters, config, trace, stage, counter):
    S: deque = deque(maxlen=config.memory)
    Y: deque = deque(maxlen=config.memory)
    for _ in range(iters):
        gm = np.where(free, g, 0.0)
        if np.max(np.abs(gm)) < config.grad_tol:
            trace.notes.append(f"stage {stage}: gradient norm below {config.grad_tol:g} at iteration {counter[0]}")
            break
        if S:
            d = -_two_loop(gm, S, Y)
            if gm @ d >= 0:
                S.clear()
                Y.clear()
                d = -gm / np.linalg.norm(gm)
        else:
            d = -gm / np.linalg.norm(gm)
        slope = gm @ d
        log.debug("direction |d|=%.3e slope=%.3e memory=%d", np.linalg.norm(d), slope, len(S))
        alpha = 1.0
        for _ in range(config.max_backtracks):
            trial = theta + alpha * d
            try:
                fn, gn = fg(trial)
            except NumericalFailure as exc:
                log.debug("trial step %g rejected: %s", alpha, exc)
                fn, gn = np.inf, None
            if np.isfinite(fn) and fn <= f + config.armijo * alpha * slope:
                break
            alpha *= 0.5
        else:
            trace.notes.append(f"stage {stage}: line search failed at iteration {counter[0] + 1}; stopped early")
            break
        s = trial - theta
        yv = np.where(free, gn - g, 0.0)
        if s @ yv > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            S.append(s)
            Y.append(yv)
        theta, f, g = trial, fn, gn
        counter[0] += 1
        gnorm = float(np.max(np.abs(np.where(free, g, 0.0))))
        trace.records.append(TraceRecord(counter[0], stage, f, gnorm, alpha))
        log.info("iter %d [%s] risk=%.10g |g|=%.3e step=%g", counter[0], stage, f, gnorm, alpha)
    return theta, f, g


def train(
    dataset,
    graph: RegionGraph,
    system: ConstraintSystem,
    config: TrainConfig = TrainConfig(),
    params: ParameterSet | None = None,
) -> tuple[ParameterSet, TrainTrace]:
    """Fit the weight tables to minimize the empirical risk.

    Returns the final parameters and a trace with one record per accepted
    step plus an iteration-0 record of the starting risk.
    """
    if len(dataset) == 0:
        raise InvalidArgument("empty dataset")
    params = params or init_parameters(graph)
    trace = TrainTrace()
    if config.stage1_iters == 0 and config.stage2_iters == 0:
        return params, trace

    def fg(theta):
        return empirical_risk(
            dataset, graph, params.with_theta(theta), system, config.loss, config.inner_tol, config.workers
        )

    theta = params.theta.copy()
    f, g = fg(theta)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise TrainingError(f"initial risk is not finite ({f})")
    positive = params.layout.positive_mask()
    schedule = [
        (stage, iters, free)
        for stage, iters, free in (
            ("frozen", config.stage1_iters, ~positive),
            ("full", config.stage2_iters, np.ones_like(positive)),
        )
        if iters
    ]
    stage0, _, free0 = schedule[0]
    trace.records.append(TraceRecord(0, stage0, f, float(np.max(np.abs(np.where(free0, g, 0.0)))), 0.0))
    counter = [0]
    for stage, iters, free in schedule:
        theta, f, g = _stage(fg, theta, f, g, free, iters, config, trace, stage, counter)
    return params.with_theta(theta), trace


# -- evaluation ---------------------------------------------------------------


def metrics_from_beliefs(graph: RegionGraph, beliefs, dataset) -> dict[str, float]:
    """Per-variable classification, regression, log and quad errors.

    Classification picks the most probable state; states within
    ``TIE_TOL`` of the maximum count as tied and the lowest one wins.
    Regression compares the true state with the belief mean (for binary
    variables, ``b(x_i = 1)``).
    """
    n = 0
    classif = regress = l_log = l_quad = 0.0
    states = np.arange(graph.hidden_arity)
    for b, sample in zip(beliefs, dataset):
        idx = np.flatnonzero(sample.mask)
        table = _singleton_table(graph, b)[idx]
        truth = sample.hidden[idx]
        pred = np.argmax(table >= table.max(axis=1, keepdims=True) - TIE_TOL, axis=1)
        classif += float(np.sum(pred != truth))
        regress += float(np.sum((truth - table @ states) ** 2))
        l_log += log_loss(graph, b, sample)
        l_quad += quad_loss(graph, b, sample)
        n += idx.size
    if n == 0:
        raise InvalidArgument("no masked variables to evaluate")
    return {"classif": classif / n, "regress": regress / n, "l_log": l_log / n, "l_quad": l_quad / n}


def infer_all(dataset, graph, system, params, tol=DEFAULT_TOL) -> list[np.ndarray]:
    out = []
    for i, sample in enumerate(dataset):
        res = infer(graph, params, system, sample.observed, tol=tol)
        if not res.converged:
            raise NumericalFailure(f"inference for sample {i} did not converge (residual {res.kkt_residual:.3e})")
        out.append(res.beliefs)
    return out


def evaluate(dataset, graph, system, params, tol: float = DEFAULT_TOL) -> dict[str, float]:
    return metrics_from_beliefs(graph, infer_all(dataset, graph, system, params, tol), dataset)
