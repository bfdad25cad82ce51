"""Data generation, warm starting, adaptive rounds, validation, closed loop.

Every point-level task runs through :func:`hjbkit.parallel.pmap`, which
returns results in input order, so datasets and reports do not depend on
the worker count.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .bvp import Trajectory, solve_tpbvp
from .errors import AllSolvesFailed, HJBError
from .integrate import rk45_adaptive
from .marching import MarchSchedule, march
from .parallel import pmap
from .problems import Sample, get_problem
from .value_net import MlpModel, TrainConfig, train

__all__ = [
    "RoundPlan",
    "ValidationReport",
    "ClosedLoopResult",
    "GenerationReport",
    "write_dataset",
    "read_dataset",
    "sample_to_record",
    "sample_from_record",
    "solve_points_march",
    "generate_seed",
    "warmstart_guess",
    "generate_warm",
    "adaptive_select",
    "validation_set",
    "validate",
    "run_adaptive",
    "closed_loop_sim",
    "AdaptiveHJBLearner",
]

SOLVE_ERRORS = (HJBError, FloatingPointError, ValueError, np.linalg.LinAlgError)


# ---------------------------------------------------------------- datasets


def sample_to_record(s):
    return {"t": float(s.t), "x": [float(a) for a in s.x], "v": float(s.v), "lambda": [float(a) for a in s.lam], "src": s.src}


def sample_from_record(rec):
    return Sample(float(rec["t"]), np.array(rec["x"], dtype=float), float(rec["v"]), np.array(rec["lambda"], dtype=float), rec.get("src", "march"))


def write_dataset(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s)) + "\n")


def read_dataset(path):
    with open(path) as fh:
        return [sample_from_record(json.loads(line)) for line in fh if line.strip()]


def _trajectory_samples(sol, decimate, src):
    """Initial-point sample plus every ``decimate``-th interior mesh point."""
    n = sol.n
    idx = [0] + list(range(decimate, len(sol.mesh) - 1, decimate)) if decimate else [0]
    return [
        Sample(float(sol.mesh[k]), sol.Y[:n, k].copy(), float(sol.Y[2 * n, k]), sol.Y[n : 2 * n, k].copy(), src)
        for k in idx
    ]


@dataclass
class GenerationReport:
    requested: int
    converged: int = 0
    samples: int = 0
    fallbacks: int = 0
    failures: list = field(default_factory=list)
    solve_times: list = field(default_factory=list)

    @property
    def rate(self):
        return self.converged / self.requested if self.requested else 0.0

    @property
    def mean_time(self):
        return float(np.mean(self.solve_times)) if self.solve_times else float("nan")

    def as_dict(self, timing=False):
        d = {
            "requested": self.requested,
            "converged": self.converged,
            "convergence_rate": self.rate,
            "samples": self.samples,
            "fallbacks": self.fallbacks,
            "failures": list(self.failures),
        }
        if timing:
            d["mean_solve_time"] = self.mean_time
        return d


def _march_point(ocp, march_kw, decimate, x0):
    start = time.perf_counter()
    try:
        sol = march(ocp, ocp.t0, x0, **march_kw)
    except SOLVE_ERRORS as exc:
        return None, type(exc).__name__, time.perf_counter() - start
    return _trajectory_samples(sol, decimate, "march"), None, time.perf_counter() - start


def _collect(points, results, report):
    data = []
    for i, (samples, err, elapsed) in enumerate(results):
        if samples is None:
            report.failures.append({"index": i, "error": err})
            continue
        report.converged += 1
        report.solve_times.append(elapsed)
        data.extend(samples)
    report.samples = len(data)
    return data


def _march_kwargs(schedule=None, extension="piecewise", **solver_kw):
    kw = dict(solver_kw)
    kw["schedule"] = schedule or MarchSchedule()
    kw["extension"] = extension
    return kw


def solve_points_march(ocp, points, decimate=4, workers=1, schedule=None, extension="piecewise", **solver_kw):
    """March every point; returns ``(samples, GenerationReport)``."""
    points = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, ocp.n)
    fn = partial(_march_point, ocp, _march_kwargs(schedule, extension, **solver_kw), decimate)
    report = GenerationReport(requested=len(points))
    data = _collect(points, pmap(fn, list(points), workers), report)
    return data, report


def generate_seed(ocp, count, seed=0, decimate=4, workers=1, schedule=None, extension="piecewise", points=None, **solver_kw):
    """Seed dataset from ``count`` uniform initial states solved by marching."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if points is None:
        points = ocp.sample_states(np.random.default_rng(seed), count)
    data, report = solve_points_march(ocp, points, decimate, workers, schedule, extension, **solver_kw)
    if report.converged == 0:
        raise AllSolvesFailed(f"none of the {count} seed points converged")
    return data, report


# ---------------------------------------------------------------- warm start


def _feedback_rhs(model, ocp, t, x):
    _, g = model.predict_with_gradient(t, x[None, :])
    lam = g[0, 1:]
    u = ocp.optimal_control(t, x, lam)
    return np.asarray(ocp.dynamics(t, x, u), dtype=float)


def warmstart_guess(model, ocp, t0, x0, tf=None, rtol=1e-6, atol=1e-8, intervals=64):
    """Guess from a closed-loop rollout under the model's feedback law.

    ``x`` comes from integrating the dynamics with the control that
    minimizes the Hamiltonian at the model's costate; ``lam`` and ``w`` are
    the model's gradient and value along that rollout. The guess lives on
    the integrator's steps merged with ``intervals`` uniform intervals.
    """
    tf = ocp.tf if tf is None else float(tf)
    x0 = np.asarray(x0, dtype=float).reshape(ocp.n)
    sol = rk45_adaptive(partial(_feedback_rhs, model, ocp), t0, tf, x0, rtol=rtol, atol=atol)
    mesh = np.union1d(sol.mesh, np.linspace(t0, tf, intervals + 1))
    mesh = mesh[np.concatenate([[True], np.diff(mesh) > 1e-9 * (tf - t0)])]
    mesh[-1] = tf
    X = sol.dense_eval(mesh)
    vals, grads = model.predict_with_gradient(mesh, X.T)
    Y = np.vstack([X, grads[:, 1:].T, vals[None, :]])
    return Trajectory(mesh, Y)


def _warm_point(model, ocp, fallback, march_kw, decimate, solver_kw, x0):
    start = time.perf_counter()
    try:
        guess = warmstart_guess(model, ocp, ocp.t0, x0)
        sol = solve_tpbvp(ocp, ocp.t0, x0, guess=guess, **solver_kw)
        return _trajectory_samples(sol, decimate, "warm"), None, time.perf_counter() - start, False
    except SOLVE_ERRORS as exc:
        err = type(exc).__name__
    if fallback:
        samples, err2, _ = _march_point(ocp, march_kw, decimate, x0)
        if samples is not None:
            return samples, None, time.perf_counter() - start, True
        err = f"{err}; fallback {err2}"
    return None, err, time.perf_counter() - start, False


def generate_warm(model, ocp, points, decimate=4, workers=1, fallback=False, schedule=None, extension="piecewise", **solver_kw):
    """Solve each point from a model-based guess, without marching.

    With ``fallback`` a failed warm solve is retried by marching; such
    points are counted in ``report.fallbacks`` and excluded from the warm
    timing statistics.
    """
    points = np.asarray(points, dtype=float).reshape(-1, ocp.n)
    report = GenerationReport(requested=len(points))
    if len(points) == 0:
        return [], report
    fn = partial(_warm_point, model, ocp, fallback, _march_kwargs(schedule, extension), decimate, solver_kw)
    data = []
    for i, (samples, err, elapsed, used_fallback) in enumerate(pmap(fn, list(points), workers)):
        if samples is None:
            report.failures.append({"index": i, "error": err})
            continue
        if used_fallback:
            report.fallbacks += 1
        else:
            report.converged += 1
            report.solve_times.append(elapsed)
        data.extend(samples)
    report.samples = len(data)
    return data, report


def adaptive_select(model, ocp, count, multiplier=4, fraction=0.5, seed=0):
    """Pick ``count`` new initial states, favouring large ``|V_x|``.

    Draws ``multiplier * count`` uniform candidates, keeps the steepest
    ``round(fraction * count)`` by the model's gradient norm at ``t0`` and
    fills the rest uniformly from the remaining candidates.
    """
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pool = ocp.sample_states(rng, int(multiplier * count))
    n_steep = int(round(fraction * count))
    chosen = np.array([], dtype=int)
    if n_steep:
        _, g = model.predict_with_gradient(np.full(len(pool), ocp.t0), pool)
        steep = np.linalg.norm(g[:, 1:], axis=1)
        # stable sort keeps ties in pool order
        chosen = np.argsort(-steep, kind="stable")[:n_steep]
    rest = np.setdiff1d(np.arange(len(pool)), chosen)
    n_rand = count - len(chosen)
    if n_rand:
        chosen = np.concatenate([chosen, rng.choice(rest, size=n_rand, replace=False)])
    return pool[np.sort(chosen)]


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    count: int
    converged: int
    v_rel_l2: float
    lam_rel_l2: float
    v_max_abs: float
    truth_time: float = 0.0
    eval_time: float = 0.0

    @property
    def convergence_rate(self):
        return self.converged / self.count if self.count else 0.0

    def as_dict(self, timing=False):
        d = asdict(self)
        d["convergence_rate"] = self.convergence_rate
        if not timing:
            d.pop("truth_time")
            d.pop("eval_time")
        return d


@dataclass
class ValidationSet:
    t: np.ndarray
    X: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    requested: int
    wall_time: float = 0.0


def validation_set(ocp, count, seed=0, workers=1, points=None, **march_kw):
    """Ground truth at fresh uniform initial states, always by marching."""
    if count < 1:
        raise ValueError("count must be >= 1")
    start = time.perf_counter()
    if points is None:
        points = ocp.sample_states(np.random.default_rng(seed), count)
    data, report = solve_points_march(ocp, points, decimate=0, workers=workers, **march_kw)
    if report.converged == 0:
        raise AllSolvesFailed("no validation point converged")
    return ValidationSet(
        np.array([s.t for s in data]),
        np.array([s.x for s in data]),
        np.array([s.v for s in data]),
        np.array([s.lam for s in data]),
        count,
        time.perf_counter() - start,
    )


def _rel(err, ref):
    den = np.linalg.norm(ref)
    return float(np.linalg.norm(err) / den) if den > 0 else float(np.linalg.norm(err))


def validate(model, ocp, count=None, seed=0, truth=None, workers=1):
    """Relative L2 errors of the model against TPBVP ground truth."""
    if truth is None:
        if count is None:
            raise ValueError("give count or a precomputed validation set")
        truth = validation_set(ocp, count, seed, workers)
    start = time.perf_counter()
    vals, grads = model.predict_with_gradient(truth.t, truth.X)
    return ValidationReport(
        count=truth.requested,
        converged=len(truth.v),
        v_rel_l2=_rel(vals - truth.v, truth.v),
        lam_rel_l2=_rel(grads[:, 1:] - truth.lam, truth.lam),
        v_max_abs=float(np.max(np.abs(vals - truth.v))),
        truth_time=truth.wall_time,
        eval_time=time.perf_counter() - start,
    )


# ---------------------------------------------------------------- adaptive rounds


@dataclass(frozen=True)
class RoundPlan:
    """Cumulative number of solved initial states after each round."""

    sizes: tuple = (64, 128, 1024, 4096)
    pool_multiplier: float = 4.0
    steep_fraction: float = 0.5
    validation_count: int = 100
    decimate: int = 4

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or sizes[0] < 1 or any(b < a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("round sizes must be positive and nondecreasing")
        if self.pool_multiplier < 1 or not 0 <= self.steep_fraction <= 1:
            raise ValueError("invalid pool multiplier or steep fraction")
        if self.validation_count < 1 or self.decimate < 0:
            raise ValueError("invalid validation count or decimation")
        object.__setattr__(self, "sizes", sizes)


def run_adaptive(ocp, plan=None, config=None, seed=0, workers=1, hidden=(64, 64, 64), truth=None, log=None):
    """Seed, train, then grow the dataset adaptively round by round.

    Returns ``(model, reports, data)``; ``reports`` has one entry per round
    with the validation report and generation statistics. Validation uses
    one fixed set of fresh points for every round.
    """
    plan = plan or RoundPlan()
    config = config or TrainConfig(seed=seed)
    seeds = np.random.SeedSequence(seed).generate_state(len(plan.sizes) + 2)
    if truth is None:
        truth = validation_set(ocp, plan.validation_count, int(seeds[0]), workers)
    data, gen = generate_seed(ocp, plan.sizes[0], int(seeds[1]), plan.decimate, workers)
    model = MlpModel.for_problem(ocp, hidden, seed=config.seed)
    reports = []
    have = gen.converged
    for r, size in enumerate(plan.sizes):
        if r > 0:
            new = size - have
            if new > 0:
                points = adaptive_select(model, ocp, new, plan.pool_multiplier, plan.steep_fraction, int(seeds[r + 1]))
                extra, gen = generate_warm(model, ocp, points, plan.decimate, workers, fallback=True)
                data = data + extra
                have += gen.converged + gen.fallbacks
        model, history = train(model, data, config)
        val = validate(model, ocp, truth=truth)
        reports.append(
            {
                "round": r + 1,
                "initial_points": have,
                "samples": len(data),
                "generation": gen.as_dict(),
                "final_loss": float(min(h[2] for h in history)),
                "validation": val,
            }
        )
        if log is not None:
            log(f"round {r + 1}: {have} points, {len(data)} samples, V rel err {val.v_rel_l2:.4g}")
    return model, reports, data


# ---------------------------------------------------------------- closed loop


@dataclass
class ClosedLoopResult:
    trajectory: object
    cost: float
    running_cost: float
    terminal_cost: float


def _closed_loop_rhs(model, ocp, t, z):
    x = z[:-1]
    _, g = model.predict_with_gradient(t, x[None, :])
    u = ocp.optimal_control(t, x, g[0, 1:])
    xdot = np.asarray(ocp.dynamics(t, x, u), dtype=float)
    return np.append(xdot, float(ocp.running_cost(t, x, u)))


def closed_loop_sim(model, ocp, x0, t0=None, tf=None, rtol=1e-9, atol=1e-11):
    """Fly the feedback law from ``model`` and report the realized cost."""
    t0 = ocp.t0 if t0 is None else float(t0)
    tf = ocp.tf if tf is None else float(tf)
    z0 = np.append(np.asarray(x0, dtype=float).reshape(ocp.n), 0.0)
    sol = rk45_adaptive(partial(_closed_loop_rhs, model, ocp), t0, tf, z0, rtol=rtol, atol=atol)
    xf = sol.final[:-1]
    running = float(sol.final[-1])
    terminal = float(ocp.terminal_cost(xf))
    return ClosedLoopResult(sol, running + terminal, running, terminal)


# ---------------------------------------------------------------- estimator


class AdaptiveHJBLearner(RegressorMixin, BaseEstimator):
    """Estimator front end for :func:`run_adaptive`.

    ``fit`` generates its own data, so ``X`` and ``y`` are ignored there.
    ``predict`` takes rows ``(t, x_1, ..., x_n)`` and returns values;
    ``transform`` returns the model's costate at those rows.
    """

    def __init__(
        self,
        problem="rigid_body",
        round_sizes=(64, 128, 1024, 4096),
        pool_multiplier=4.0,
        steep_fraction=0.5,
        validation_count=100,
        decimate=4,
        hidden=(64, 64, 64),
        mu=1.0,
        adam_steps=2000,
        lbfgs_steps=5000,
        seed=0,
        workers=1,
    ):
        self.problem = problem
        self.round_sizes = round_sizes
        self.pool_multiplier = pool_multiplier
        self.steep_fraction = steep_fraction
        self.validation_count = validation_count
        self.decimate = decimate
        self.hidden = hidden
        self.mu = mu
        self.adam_steps = adam_steps
        self.lbfgs_steps = lbfgs_steps
        self.seed = seed
        self.workers = workers

    def fit(self, X=None, y=None):
        ocp = get_problem(self.problem) if isinstance(self.problem, str) else self.problem
        plan = RoundPlan(
            tuple(self.round_sizes), self.pool_multiplier, self.steep_fraction, self.validation_count, self.decimate
        )
        config = TrainConfig(mu=self.mu, adam_steps=self.adam_steps, lbfgs_steps=self.lbfgs_steps, seed=self.seed)
        self.model_, self.reports_, self.data_ = run_adaptive(
            ocp, plan, config, self.seed, self.workers, tuple(self.hidden)
        )
        self.n_features_in_ = ocp.n + 1
        return self

    def _rows(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns (t then state), got {X.shape[1]}")
        return X

    def predict(self, X):
        X = self._rows(X)
        return self.model_.predict(X[:, 0], X[:, 1:])

    def transform(self, X):
        X = self._rows(X)
        return self.model_.predict_with_gradient(X[:, 0], X[:, 1:])[1][:, 1:]
