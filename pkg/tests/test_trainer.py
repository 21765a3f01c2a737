import numpy as np
import pytest

import cvxmarg.trainer as trainer_module
from cvxmarg.errors import InvalidArgument, NumericalFailure, TrainingError
from cvxmarg.loss import Sample, empirical_risk
from cvxmarg.model import build_grid_model, realize_weights
from cvxmarg.oracle import stratified_draws
from cvxmarg.polytope import build_constraints, uniform_beliefs
from cvxmarg.solver import infer
from cvxmarg.trainer import (
    TrainConfig,
    TrainTrace,
    evaluate,
    init_parameters,
    metrics_from_beliefs,
    train,
)

from conftest import make_rng


def noisy_dataset(graph, n, rate, seed):
    rng = make_rng(seed)
    out = []
    for _ in range(n):
        x = (rng.random(graph.num_hidden) < 0.4).astype(int)
        flip = rng.random(graph.num_hidden) < rate
        out.append(Sample(x, np.where(flip, 1 - x, x)))
    return out


@pytest.fixture(scope="module")
def small():
    g = build_grid_model(2, 3)
    return g, build_constraints(g), noisy_dataset(g, 12, 0.2, 71)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"loss": "hinge"}, {"stage1_iters": -1}, {"inner_tol": 0.0}, {"memory": 0}, {"workers": 0}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgument):
            TrainConfig(**kwargs)


class TestInit:
    def test_weights_zero_and_one(self, grid3):
        g, _ = grid3
        w = realize_weights(g, init_parameters(g), make_rng(1).integers(0, 2, 9))
        np.testing.assert_array_equal(w[0], 0.0)
        np.testing.assert_array_equal(w[1], 1.0)

    def test_uniform_inference(self, grid3):
        g, s = grid3
        res = infer(g, init_parameters(g), s, np.zeros(9, int))
        np.testing.assert_allclose(res.beliefs, uniform_beliefs(g), atol=1e-14)


class TestTrain:
    def test_noop_schedule(self, small):
        g, s, data = small
        params, trace = train(data, g, s, TrainConfig(stage1_iters=0, stage2_iters=0))
        assert params == init_parameters(g)
        assert trace.records == []

    def test_freeze_contract(self, small):
        g, s, data = small
        params, trace = train(data, g, s, TrainConfig(stage1_iters=4, stage2_iters=0))
        positive = params.layout.positive_mask()
        assert np.all(params.theta[positive] == 0.0)
        assert np.any(params.theta[~positive] != 0.0)
        assert {r.stage for r in trace.records} == {"frozen"}

    def test_risk_decreases(self, small):
        g, s, data = small
        params, trace = train(data, g, s, TrainConfig(stage1_iters=5, stage2_iters=5))
        risks = [r.risk for r in trace.records]
        assert all(np.isfinite(risks))
        assert np.all(np.diff(risks) <= 0)
        assert risks[-1] < risks[0]
        final, _ = empirical_risk(data, g, params, s, "log", with_grad=False)
        assert final == pytest.approx(risks[-1], rel=1e-12)
        assert [r.stage for r in trace.records][-1] == "full"
        assert [r.iteration for r in trace.records] == list(range(len(trace.records)))

    def test_reproducible(self, small):
        g, s, data = small
        cfg = TrainConfig(loss="quad", stage1_iters=3, stage2_iters=3)
        p1, t1 = train(data, g, s, cfg)
        p2, t2 = train(data, g, s, cfg)
        assert p1 == p2
        assert t1.to_csv() == t2.to_csv()

    def test_empty_dataset(self, small):
        g, s, _ = small
        with pytest.raises(InvalidArgument):
            train([], g, s)

    def test_non_finite_initial_risk(self, small, monkeypatch):
        g, s, data = small
        monkeypatch.setattr(trainer_module, "empirical_risk", lambda *a, **k: (np.nan, np.zeros(40)))
        with pytest.raises(TrainingError):
            train(data, g, s, TrainConfig(stage1_iters=1))

    def test_line_search_failure_stops_early(self, small, monkeypatch):
        g, s, data = small
        calls = []

        def fake(dataset, graph, params, system, kind, tol, workers):
            calls.append(1)
            if len(calls) > 1:
                raise NumericalFailure("synthetic failure")
            return empirical_risk(dataset, graph, params, system, kind, tol, workers)

        monkeypatch.setattr(trainer_module, "empirical_risk", fake)
        params, trace = train(data, g, s, TrainConfig(stage1_iters=3, stage2_iters=0, max_backtracks=3))
        assert params == init_parameters(g)
        assert len(trace.records) == 1
        assert any("line search failed" in note for note in trace.notes)

    def test_gradient_stop(self, edge):
        g, s = edge
        rng = make_rng(72)
        states = stratified_draws(np.full(16, 1 / 16) + np.arange(16) / 480, 64, rng)
        data = [Sample(np.unravel_index(k, (2,) * 4)[:2], np.unravel_index(k, (2,) * 4)[2:]) for k in states]
        _, trace = train(data, g, s, TrainConfig(stage1_iters=200, stage2_iters=0))
        assert any("gradient norm below" in n for n in trace.notes)
        assert trace.records[-1].grad_norm < 1e-6
        assert len(trace.records) < 201


class TestTraceCsv:
    def test_format(self):
        trace = TrainTrace()
        trace.records.append(trainer_module.TraceRecord(0, "frozen", 0.1, 2.0, 0.0))
        trace.notes.append("done")
        lines = trace.to_csv().splitlines()
        assert lines[0] == "iteration,stage,risk,grad_norm,step"
        assert lines[1] == "0,frozen,0.10000000000000001,2,0"
        assert lines[2] == "# done"


class TestMetrics:
    def test_perfect_beliefs(self, grid2):
        g, _ = grid2
        x = np.array([1, 0, 0, 1])
        b = uniform_beliefs(g)
        for i in range(4):
            b[g.block(g.singleton_of[i])] = np.eye(2)[x[i]]
        m = metrics_from_beliefs(g, [b], [Sample(x, x)])
        assert m == {"classif": 0.0, "regress": 0.0, "l_log": 0.0, "l_quad": -1.0}

    def test_uniform_beliefs(self, grid2):
        g, _ = grid2
        x = np.array([1, 1, 0, 1])
        m = metrics_from_beliefs(g, [uniform_beliefs(g)], [Sample(x, x)])
        # ties go to state 0, so every true 1 is misclassified
        assert m["classif"] == 0.75
        assert m["regress"] == 0.25
        assert m["l_log"] == pytest.approx(np.log(2), abs=1e-15)
        assert m["l_quad"] == -0.5

    def test_near_ties_resolve_low(self, edge):
        g, _ = edge
        b = uniform_beliefs(g)
        b[:2] = [0.5 - 1e-12, 0.5 + 1e-12]
        m = metrics_from_beliefs(g, [b], [Sample([0, 1], [0, 0], [True, False])])
        assert m["classif"] == 0.0

    def test_evaluate_initial(self, small):
        g, s, data = small
        m = evaluate(data, g, s, init_parameters(g))
        assert m["l_log"] == pytest.approx(np.log(2), abs=1e-9)
        assert m["l_quad"] == pytest.approx(-0.5, abs=1e-9)
        assert m["regress"] == pytest.approx(0.25, abs=1e-9)

    def test_no_masked_variables(self, edge):
        g, _ = edge
        with pytest.raises(InvalidArgument):
            metrics_from_beliefs(g, [uniform_beliefs(g)], [Sample([-1, -1], [0, 0])])
