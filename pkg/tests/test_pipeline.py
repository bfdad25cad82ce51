import json

import numpy as np
import pytest

from hjbkit.bvp import solve_tpbvp
from hjbkit.errors import AllSolvesFailed
from hjbkit.pipeline import (
    AdaptiveHJBLearner,
    RoundPlan,
    adaptive_select,
    closed_loop_sim,
    generate_seed,
    generate_warm,
    read_dataset,
    run_adaptive,
    validate,
    validation_set,
    warmstart_guess,
    write_dataset,
)
from hjbkit.problems import Sample, lqr_test_problem
from hjbkit.value_net import MlpModel, TrainConfig


class QuadraticModel:
    """Stand-in model ``V = k |x|^2 / 2`` exposing the network interface."""

    def __init__(self, k=1.0):
        self.k = k

    def predict(self, t, X):
        X = np.atleast_2d(X)
        return 0.5 * self.k * np.sum(X * X, axis=1)

    def predict_with_gradient(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        g = np.column_stack([np.zeros(len(X)), self.k * X])
        return self.predict(t, X), g


def zero_net(ocp):
    m = MlpModel.for_problem(ocp, (4,))
    return m.set_flat(np.zeros(m.n_params))


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = [Sample(float(rng.uniform()), rng.normal(size=3), float(rng.normal()), rng.normal(size=3), src) for src in ("march", "warm", "backward")]
        path = tmp_path / "d.jsonl"
        write_dataset(path, samples)
        back = read_dataset(path)
        for a, b in zip(samples, back):
            assert a.t == b.t and a.v == b.v and a.src == b.src
            np.testing.assert_array_equal(a.x, b.x)
            np.testing.assert_array_equal(a.lam, b.lam)

    def test_schema(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(path, [Sample(0.5, np.array([1.0, 2.0]), 3.0, np.array([0.1, 0.2]), "march")])
        rec = json.loads(path.read_text().splitlines()[0])
        assert rec == {"t": 0.5, "x": [1.0, 2.0], "v": 3.0, "lambda": [0.1, 0.2], "src": "march"}


class TestSeed:
    def test_lqr_values(self, lqr):
        data, report = generate_seed(lqr, 10, seed=3)
        assert report.converged == 10
        for s in data:
            assert abs(s.v - 0.5 * s.x[0] ** 2) <= 1e-5

    def test_origin(self, rigid):
        data, report = generate_seed(rigid, 1, points=np.zeros((1, 6)), decimate=0)
        assert len(data) == 1 and data[0].v == 0.0 and report.rate == 1.0

    def test_initial_samples_present(self, lqr):
        data, _ = generate_seed(lqr, 5, seed=1, decimate=4)
        assert sum(s.t == 0.0 for s in data) == 5

    def test_all_failed(self, lqr):
        with pytest.raises(AllSolvesFailed):
            generate_seed(lqr, 2, seed=1, max_newton=0)

    def test_invalid(self, lqr):
        with pytest.raises(ValueError):
            generate_seed(lqr, 0)


class TestWarm:
    def test_exact_guess(self, lqr):
        guess = warmstart_guess(QuadraticModel(), lqr, 0.0, np.array([1.0]))
        t = guess.mesh
        np.testing.assert_allclose(guess.Y[0], np.exp(-t), atol=1e-4)
        np.testing.assert_allclose(guess.Y[1], guess.Y[0], atol=1e-15)
        sol = solve_tpbvp(lqr, 0.0, np.array([1.0]), guess=guess)
        assert sol.report.newton_iterations <= 3

    def test_zero_model_guess(self, lqr):
        guess = warmstart_guess(zero_net(lqr), lqr, 0.0, np.array([0.7]))
        np.testing.assert_allclose(guess.Y[0], 0.7, atol=1e-12)
        np.testing.assert_array_equal(guess.Y[1], 0.0)

    def test_empty(self, lqr):
        data, report = generate_warm(QuadraticModel(), lqr, np.zeros((0, 1)))
        assert data == [] and report.requested == 0

    def test_fallback(self, lqr):
        pts = np.array([[0.5], [-0.3]])
        _, plain = generate_warm(QuadraticModel(), lqr, pts, max_newton=0)
        assert plain.converged == 0 and len(plain.failures) == 2
        # a zero Newton budget makes every warm solve fail; marching cannot help either
        _, fb = generate_warm(QuadraticModel(), lqr, pts, fallback=True, max_newton=0)
        assert all("fallback" in f["error"] for f in fb.failures)

    def test_fallback_rescues(self, lqr, monkeypatch):
        import hjbkit.pipeline as pl
        from hjbkit.errors import NonFiniteValue

        def broken(*args, **kwargs):
            raise NonFiniteValue("rollout failed")

        monkeypatch.setattr(pl, "warmstart_guess", broken)
        data, report = generate_warm(QuadraticModel(), lqr, np.array([[0.5]]), fallback=True)
        assert report.fallbacks == 1 and report.converged == 0 and data


class TestSelect:
    def test_uniform_when_fraction_zero(self, lqr):
        a = adaptive_select(QuadraticModel(), lqr, 10, multiplier=3, fraction=0.0, seed=4)
        assert a.shape == (10, 1)

    def test_pool_returned(self, rigid):
        rng = np.random.default_rng(9)
        pool = rigid.sample_states(rng, 12)
        got = adaptive_select(QuadraticModel(), rigid, 12, multiplier=1, fraction=1.0, seed=9)
        np.testing.assert_array_equal(got, pool)

    def test_prefers_steep(self, rigid):
        steep = adaptive_select(QuadraticModel(), rigid, 40, multiplier=4, fraction=1.0, seed=2)
        pool = rigid.sample_states(np.random.default_rng(2), 160)
        assert np.mean(np.linalg.norm(steep, axis=1)) > np.mean(np.linalg.norm(pool, axis=1))

    def test_invalid(self, lqr):
        with pytest.raises(ValueError):
            adaptive_select(QuadraticModel(), lqr, 3, multiplier=0.5)


class TestValidate:
    def test_perfect_model(self, lqr):
        report = validate(QuadraticModel(), lqr, 12, seed=5)
        assert report.v_rel_l2 <= 1e-5 and report.lam_rel_l2 <= 1e-5
        assert report.convergence_rate == 1.0

    def test_zero_model(self, lqr):
        truth = validation_set(lqr, 1, points=np.array([[1.0]]))
        report = validate(zero_net(lqr), lqr, truth=truth)
        assert report.v_rel_l2 == pytest.approx(1.0, abs=1e-12)

    def test_report_fields(self, lqr):
        d = validate(QuadraticModel(1.1), lqr, 5, seed=1).as_dict()
        assert set(d) == {"count", "converged", "v_rel_l2", "lam_rel_l2", "v_max_abs", "convergence_rate"}
        assert all(np.isfinite(v) for v in d.values())


class TestClosedLoop:
    def test_exact_lqr(self, lqr):
        res = closed_loop_sim(QuadraticModel(), lqr, np.array([1.0]))
        assert abs(res.cost - 0.5) <= 1e-4

    def test_origin(self, rigid):
        res = closed_loop_sim(QuadraticModel(), rigid, np.zeros(6))
        assert res.cost == 0.0

    def test_lower_bound(self, lqr, rng):
        for k in (0.5, 0.8, 1.3, 2.0):
            x0 = rng.uniform(-1, 1, 1)
            res = closed_loop_sim(QuadraticModel(k), lqr, x0)
            assert res.cost >= 0.5 * x0[0] ** 2 - 1e-8


class TestRounds:
    def test_plan_validation(self):
        with pytest.raises(ValueError):
            RoundPlan(sizes=(64, 32))
        with pytest.raises(ValueError):
            RoundPlan(steep_fraction=1.5)

    def test_lqr_two_rounds(self, lqr):
        plan = RoundPlan(sizes=(16, 32), validation_count=20)
        cfg = TrainConfig(adam_steps=300, lbfgs_steps=700)
        model, reports, data = run_adaptive(lqr, plan, cfg, seed=1, hidden=(16, 16))
        assert len(reports) == 2
        assert reports[-1]["initial_points"] == 32
        assert reports[-1]["validation"].v_rel_l2 <= 1e-2

    def test_single_round(self, lqr):
        plan = RoundPlan(sizes=(8,), validation_count=5)
        _, reports, data = run_adaptive(lqr, plan, TrainConfig(adam_steps=10, lbfgs_steps=10), hidden=(4,))
        assert len(reports) == 1 and reports[0]["initial_points"] == 8
        assert {s.src for s in data} == {"march"}


def test_estimator(lqr):
    est = AdaptiveHJBLearner(problem=lqr, round_sizes=(8,), validation_count=4, hidden=(8,), adam_steps=50, lbfgs_steps=50, decimate=2)
    est.fit()
    X = np.array([[0.0, 0.5], [0.5, -0.2]])
    assert est.predict(X).shape == (2,)
    assert est.transform(X).shape == (2, 1)
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 3)))
    assert est.get_params()["round_sizes"] == (8,)
