"""Legendre-Gauss-Lobatto pseudospectral transcription and penalty solver.

States and controls are collocated at the LGL nodes mapped to
``[t0, tf]``. The running cost becomes an LGL quadrature, the dynamics
become defect equations ``D x - (tf - t0)/2 f(x, u)`` at every node, and
the resulting program is solved by a quadratic-penalty homotopy with a
quasi-Newton inner solver.
"""

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize

from .dual import Dual
from .errors import GimbalSingularity, InfeasibleAtMaxPenalty, NewtonFailure, NoConvergence, NonFiniteValue, StepUnderflow
from .integrate import rk45_adaptive

__all__ = [
    "LglGrid",
    "lgl_grid",
    "legendre",
    "TranscribedNlp",
    "transcribe",
    "PsConfig",
    "PsSolution",
    "solve_ps",
    "interpolate_solution",
    "barycentric_eval",
]


def legendre(N, x):
    """``(L_N(x), L_N'(x))`` by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    p_prev, p = np.ones_like(x), x.copy()
    if N == 0:
        return p_prev, np.zeros_like(x)
    for k in range(2, N + 1):
        p_prev, p = p, ((2 * k - 1) * x * p - (k - 1) * p_prev) / k
    # derivative from L_N' (x^2 - 1) = N (x L_N - L_{N-1}); endpoints separately
    with np.errstate(divide="ignore", invalid="ignore"):
        dp = N * (x * p - p_prev) / (x * x - 1.0)
    ends = np.isclose(np.abs(x), 1.0, rtol=0, atol=1e-15)
    if np.any(ends):
        dp = np.where(ends, np.sign(x) ** (N + 1) * N * (N + 1) / 2.0, dp)
    return p, dp


@dataclass(frozen=True)
class LglGrid:
    order: int
    nodes: np.ndarray
    weights: np.ndarray
    D: np.ndarray
    bary: np.ndarray

    def to_time(self, t0, tf):
        return t0 + 0.5 * (tf - t0) * (self.nodes + 1.0)


@lru_cache(maxsize=64)
def _lgl(N):
    if N < 1:
        raise ValueError("order must be >= 1")
    if N == 1:
        nodes = np.array([-1.0, 1.0])
    else:
        # interior nodes: roots of L_N', from cosine-spaced guesses
        x = -np.cos(np.pi * np.arange(1, N) / N)
        for _ in range(100):
            p, dp = legendre(N, x)
            d2p = (2 * x * dp - N * (N + 1) * p) / (1 - x * x)
            step = dp / d2p
            x = x - step
            if np.max(np.abs(step)) < 1e-15:
                break
        _, dp = legendre(N, x)
        if np.max(np.abs(dp)) > 1e-13 * max(1.0, N * N):
            raise NewtonFailure(f"LGL node iteration did not converge for N = {N}")
        nodes = np.concatenate([[-1.0], np.sort(x), [1.0]])
    p, _ = legendre(N, nodes)
    weights = 2.0 / (N * (N + 1) * p * p)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (p[:, None] / p[None, :]) / diff
    np.fill_diagonal(D, 0.0)
    # diagonal from exact differentiation of constants
    np.fill_diagonal(D, -D.sum(axis=1))
    bary = 1.0 / np.prod(diff, axis=1)
    bary = bary / np.max(np.abs(bary))
    for arr in (nodes, weights, D, bary):
        arr.setflags(write=False)
    return LglGrid(N, nodes, weights, D, bary)


def lgl_grid(N):
    """Nodes, quadrature weights and differentiation matrix of order ``N``."""
    return _lgl(int(N))


def barycentric_eval(nodes, bary, values, s):
    """Barycentric Lagrange interpolation; ``values`` has shape ``(k, len(nodes))``."""
    values = np.atleast_2d(values)
    scalar = np.ndim(s) == 0
    s = np.atleast_1d(np.asarray(s, dtype=float))
    diff = s[:, None] - nodes[None, :]
    exact = diff == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        c = bary[None, :] / diff
        out = (values @ c.T) / c.sum(axis=1)
    rows, cols = np.nonzero(exact)
    out[:, rows] = values[:, cols]
    return out[:, 0] if scalar else out


@dataclass
class TranscribedNlp:
    """Transcribed program in the free variables ``z``.

    ``z`` stacks the states at nodes ``1..N`` (state-major) and the
    controls at nodes ``0..N``; the state at node 0 is fixed to ``x0``.
    """

    ocp: object
    grid: LglGrid
    t0: float
    tf: float
    x0: np.ndarray
    eps: float

    @property
    def half_span(self):
        return 0.5 * (self.tf - self.t0)

    @property
    def times(self):
        return self.grid.to_time(self.t0, self.tf)

    @property
    def n_free(self):
        N = self.grid.order
        return self.ocp.n * N + self.ocp.m * (N + 1)

    @property
    def n_defects(self):
        return self.ocp.n * (self.grid.order + 1)

    @property
    def endpoint_constraints(self):
        # fixed initial state is eliminated; the terminal state is free
        return 0

    def unpack(self, z):
        n, m, N = self.ocp.n, self.ocp.m, self.grid.order
        z = np.asarray(z, dtype=float)
        X = np.empty((n, N + 1))
        X[:, 0] = self.x0
        X[:, 1:] = z[: n * N].reshape(n, N)
        U = z[n * N :].reshape(m, N + 1)
        return X, U

    def pack(self, X, U):
        return np.concatenate([np.asarray(X, dtype=float)[:, 1:].ravel(), np.asarray(U, dtype=float).ravel()])

    def _duals(self, z):
        # dynamics, running cost and terminal cost at node k read only
        # (x_k, u_k), so one direction per component seeds all nodes at once
        n, m, N = self.ocp.n, self.ocp.m, self.grid.order
        X, U = self.unpack(z)
        eye = np.eye(n + m)
        dX = np.repeat(eye[:, :n, None], N + 1, axis=2)
        dU = np.repeat(eye[:, n:, None], N + 1, axis=2)
        return Dual(X, dX), Dual(U, dU)

    def _parts(self, z, with_grad):
        ocp, t = self.ocp, self.times
        if with_grad:
            Xd, Ud = self._duals(z)
        else:
            Xd, Ud = self.unpack(z)
        f = ocp.dynamics(t, Xd, Ud)
        L = ocp.running_cost(t, Xd, Ud)
        psi = ocp.terminal_cost(Xd[:, -1])
        return Xd, f, L, psi

    def objective(self, z):
        """``(tf - t0)/2 sum_k w_k L(x_k, u_k) + psi(x_N)``."""
        _, _, L, psi = self._parts(z, False)
        return float(self.half_span * np.dot(self.grid.weights, L) + psi)

    def defects(self, z):
        """Dynamics defects, shape ``(n, N + 1)``."""
        X, f, _, _ = self._parts(z, False)
        return X @ self.grid.D.T - self.half_span * np.asarray(f)

    def merit(self, z, rho, multipliers=None):
        """``objective + mult.defects + rho/2 |defects|^2`` and its gradient."""
        n, N = self.ocp.n, self.grid.order
        Xd, f, L, psi = self._parts(z, True)
        c, w, D = self.half_span, self.grid.weights, self.grid.D
        X = Xd.val
        fval = np.asarray(f.val)
        L_der = np.broadcast_to(L.der, (self.ocp.n + self.ocp.m, N + 1))
        dval = X @ D.T - c * fval
        weight = rho * dval if multipliers is None else multipliers + rho * dval
        val = float(c * np.dot(w, L.val) + psi.val + np.sum(weight * dval) - 0.5 * rho * np.sum(dval * dval))
        # per-node chain rule; f.der[j, i, k] = d f_i / d(var j at node k)
        node = c * w * L_der - c * np.einsum("jik,ik->jk", f.der, weight)
        gX = node[:n] + weight @ D
        gX[:, N] += np.broadcast_to(psi.der, (n + self.ocp.m,))[:n]
        gU = node[n:]
        return val, np.concatenate([gX[:, 1:].ravel(), gU.ravel()])


def transcribe(ocp, N, eps=1e-6, t0=None, x0=None, tf=None):
    if N < 4:
        raise ValueError("pseudospectral order must be >= 4")
    if eps <= 0:
        raise ValueError("eps must be positive")
    t0 = ocp.t0 if t0 is None else float(t0)
    tf = ocp.tf if tf is None else float(tf)
    x0 = np.zeros(ocp.n) if x0 is None else np.asarray(x0, dtype=float).reshape(ocp.n)
    return TranscribedNlp(ocp, lgl_grid(N), t0, tf, x0, eps)


@dataclass(frozen=True)
class PsConfig:
    rho0: float = 10.0
    factor: float = 10.0
    stages: int = 6
    gtol: float = 1e-8
    max_inner: int = 20000
    memory: int = 20
    multipliers: bool = True


@dataclass
class PsSolution:
    nlp: TranscribedNlp
    X: np.ndarray
    U: np.ndarray
    value: float
    report: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.nlp.times

    @property
    def costate_free_value(self):
        return self.value


def _initial_iterate(nlp):
    ocp = nlp.ocp
    zero_u = np.zeros(ocp.m)
    try:
        sol = rk45_adaptive(lambda t, x: np.asarray(ocp.dynamics(t, x, zero_u), dtype=float), nlp.t0, nlp.tf, nlp.x0, rtol=1e-8, atol=1e-10)
        X = sol.dense_eval(nlp.times)
    except (NonFiniteValue, StepUnderflow, GimbalSingularity):
        X = np.repeat(nlp.x0[:, None], nlp.grid.order + 1, axis=1)
    return nlp.pack(X, np.zeros((ocp.m, nlp.grid.order + 1)))


def solve_ps(ocp, t0, x0, N=16, eps=1e-6, config=None, tf=None, z0=None):
    """Solve the transcribed program by a penalty homotopy.

    Each stage minimizes the penalty function with L-BFGS and multiplies
    the penalty weight by ``config.factor``. With ``config.multipliers``
    (the default) first-order multiplier estimates are carried between
    stages, which removes the ``O(1/rho)`` bias of the pure quadratic
    penalty. Returns a :class:`PsSolution` whose ``value`` is the transcribed
    objective. Raises :class:`InfeasibleAtMaxPenalty` when the largest
    defect still exceeds ``eps`` after the last stage.
    """
    config = config or PsConfig()
    start = time.perf_counter()
    nlp = transcribe(ocp, N, eps, t0, x0, tf)
    z = _initial_iterate(nlp) if z0 is None else np.asarray(z0, dtype=float)
    rho = config.rho0
    inner_total = 0
    stages = []

    mult = np.zeros((ocp.n, N + 1)) if config.multipliers else None

    def fun(zz, rho):
        try:
            val, grad = nlp.merit(zz, rho, mult)
        except (GimbalSingularity, FloatingPointError):
            return np.inf, np.zeros_like(zz)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(zz)
        return val, grad

    max_defect = np.inf
    for stage in range(config.stages):
        res = minimize(
            fun,
            z,
            args=(rho,),
            jac=True,
            method="L-BFGS-B",
            options={
                "gtol": config.gtol,
                "ftol": 0.0,
                "maxiter": config.max_inner,
                "maxfun": 2 * config.max_inner,
                "maxcor": config.memory,
                "maxls": 50,
            },
        )
        if not np.isfinite(res.fun):
            raise NoConvergence(f"penalty stage {stage} left the domain of the dynamics")
        z = res.x
        inner_total += int(res.nit)
        d = nlp.defects(z)
        max_defect = float(np.max(np.abs(d)))
        stages.append({"rho": rho, "iterations": int(res.nit), "max_defect": max_defect, "gradient_ok": bool(res.success)})
        if max_defect <= eps:
            break
        if mult is not None:
            mult = mult + rho * d
        rho *= config.factor
    X, U = nlp.unpack(z)
    report = {
        "max_defect": max_defect,
        "eps": eps,
        "stages": stages,
        "inner_iterations": inner_total,
        "order": N,
        "wall_time": time.perf_counter() - start,
        "feasible": max_defect <= eps,
    }
    if max_defect > eps:
        raise InfeasibleAtMaxPenalty(f"max defect {max_defect:.3e} exceeds eps = {eps:g} at penalty {rho:g}")
    return PsSolution(nlp, X, U, nlp.objective(z), report)


def interpolate_solution(sol, t):
    """State and control at times ``t`` by barycentric Lagrange interpolation."""
    nlp = sol.nlp
    s = 2.0 * (np.asarray(t, dtype=float) - nlp.t0) / (nlp.tf - nlp.t0) - 1.0
    x = barycentric_eval(nlp.grid.nodes, nlp.grid.bary, sol.X, s)
    u = barycentric_eval(nlp.grid.nodes, nlp.grid.bary, sol.U, s)
    return x, u
