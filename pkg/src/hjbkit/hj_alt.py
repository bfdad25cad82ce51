"""Other causality-free evaluators of Hamilton-Jacobi solutions.

* Hopf formula for ``V_t + H(V_x) = 0`` with convex initial data:
  ``V(t, x) = -min_v {psi*(v) + t H(v) - x.v}``.
* Minimization along characteristics: integrate the Hamiltonian system
  forward from ``(x0, lam0)`` and minimize the realized cost over ``lam0``.
* Pointwise evaluation of quasilinear first-order PDEs by shooting
  characteristics from an initial surface.
"""

import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .bvp import characteristic_rhs
from .dual import dual_diff
from .errors import (
    AllCandidatesFailed,
    GimbalSingularity,
    GrowthLimitExceeded,
    NoCharacteristicFound,
    NoConvergence,
    NonFiniteValue,
    ShockDetected,
    StepUnderflow,
    Unbounded,
)
from .integrate import rk45_adaptive

__all__ = [
    "HopfProblem",
    "quadratic_hopf",
    "HOPF_PROBLEMS",
    "fenchel_conjugate",
    "hopf_solve",
    "CharMinResult",
    "char_min_value",
    "QuasilinearPde",
    "quasilinear_eval",
]

log = logging.getLogger(__name__)

UNBOUNDED_LIMIT = 1e12
# candidates whose (x, lam) grows past this factor are abandoned
CANDIDATE_GROWTH = 1e3


class _Escape(Exception):
    pass


def _value_grad(fn, v):
    val, grad = dual_diff(fn, np.asarray(v, dtype=float))
    return float(val), np.asarray(grad, dtype=float)


# ---------------------------------------------------------------- Hopf formula


@dataclass(frozen=True)
class HopfProblem:
    """``V_t + H(V_x) = 0`` on ``R^n`` with ``V(0, x) = psi(x)``.

    ``hamiltonian`` and ``initial`` take an ``n``-vector (component axis
    first) and must be built from operations :func:`dual_diff` understands.
    ``conjugate`` is an optional closed form of ``psi*``.
    """

    n: int
    hamiltonian: object
    initial: object
    conjugate: object = None
    name: str = "custom"


def _quad(M):
    M = np.asarray(M, dtype=float)
    return lambda v: 0.5 * sum(M[i, j] * v[i] * v[j] for i in range(len(M)) for j in range(len(M)))


def quadratic_hopf(n=2, A=None, Q=None, c=None):
    """``H(p) = p.A p / 2`` and ``psi(x) = x.Q x / 2 + c.x`` with closed-form conjugate."""
    A = np.eye(n) if A is None else np.asarray(A, dtype=float)
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    c = np.zeros(n) if c is None else np.asarray(c, dtype=float)
    if np.any(np.linalg.eigvalsh(Q) <= 0):
        raise ValueError("Q must be positive definite for a finite conjugate")
    Qinv = np.linalg.inv(Q)
    quad_q, quad_qinv, ham = _quad(Q), _quad(Qinv), _quad(A)

    def initial(x):
        return quad_q(x) + sum(c[i] * x[i] for i in range(n))

    def conjugate(z):
        return quad_qinv([z[i] - c[i] for i in range(n)])

    return HopfProblem(n, ham, initial, conjugate, "quadratic")


HOPF_PROBLEMS = {"quadratic": quadratic_hopf}


def _conjugate_point(f, z, starts=8, seed=0, gtol=1e-10):
    """``(f*(z), maximizer)`` by multi-start BFGS on ``f(x) - z.x``."""
    z = np.asarray(z, dtype=float)
    n = z.size
    rng = np.random.default_rng(seed)
    scale = max(1.0, float(np.linalg.norm(z)))
    x_starts = [z.copy()] + [rng.uniform(-scale, scale, n) for _ in range(max(0, starts - 1))]

    def obj(x):
        val, grad = _value_grad(f, x)
        phi = val - float(x @ z)
        if -phi > UNBOUNDED_LIMIT:
            raise _Escape
        return phi, grad - z

    best = None
    for x0 in x_starts:
        try:
            res = minimize(obj, x0, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": 2000})
        except _Escape:
            raise Unbounded(f"conjugate is unbounded at z = {z.tolist()}") from None
        except NonFiniteValue:
            continue
        if not np.isfinite(res.fun):
            continue
        if -res.fun > UNBOUNDED_LIMIT:
            raise Unbounded(f"conjugate is unbounded at z = {z.tolist()}")
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise NoConvergence("no conjugate start produced a finite value")
    return -float(best.fun), best.x


def fenchel_conjugate(f, z, starts=8, seed=0):
    """``f*(z) = sup_x {x.z - f(x)}`` for a smooth coercive ``f``."""
    return _conjugate_point(f, z, starts, seed)[0]


def hopf_solve(problem, t, x, starts=8, seed=0, gtol=1e-9):
    """Value ``V(t, x)`` from the Hopf formula.

    Minimizes ``psi*(v) + t H(v) - x.v`` by BFGS from ``starts`` seeded
    points; the numeric conjugate is used when no closed form is set.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    x = np.asarray(x, dtype=float).reshape(problem.n)
    if problem.conjugate is not None:

        def obj(v):
            val, grad = _value_grad(lambda w: problem.conjugate(w) + t * problem.hamiltonian(w), v)
            return val - float(x @ v), grad - x

    else:

        def obj(v):
            # envelope theorem: the conjugate's gradient is its maximizer
            cval, cgrad = _conjugate_point(problem.initial, v, seed=seed)
            hval, hgrad = _value_grad(problem.hamiltonian, v) if t > 0 else (0.0, np.zeros_like(v))
            return cval + t * hval - float(x @ v), cgrad + t * hgrad - x

    rng = np.random.default_rng(seed)
    scale = max(1.0, float(np.linalg.norm(x)) / max(t, 1.0))
    v_starts = [x / (1.0 + t)] + [rng.uniform(-scale, scale, problem.n) for _ in range(max(0, starts - 1))]
    best, best_g = None, np.inf
    for v0 in v_starts:
        try:
            res = minimize(obj, v0, jac=True, method="BFGS", options={"gtol": gtol * 0.01, "maxiter": 2000})
        except NonFiniteValue:
            continue
        if not np.isfinite(res.fun):
            continue
        if res.fun < -UNBOUNDED_LIMIT:
            raise Unbounded("Hopf objective is unbounded below")
        gnorm = float(np.linalg.norm(res.jac))
        if gnorm <= gtol and (best is None or res.fun < best.fun):
            best = res
        best_g = min(best_g, gnorm)
    log.debug("hopf_solve t=%g starts=%d best gradient %.2e", t, len(v_starts), best_g)
    if best is None:
        raise NoConvergence(f"gradient tolerance {gtol} not met at any start (best {best_g:.2e})")
    return -float(best.fun)


# ---------------------------------------------------------------- char-min


@dataclass
class CharMinResult:
    value: float
    costate: np.ndarray
    evaluations: int
    failed_evaluations: int
    starts: int
    converged: bool
    history: list = field(default_factory=list)


def _candidate_cost(ocp, t0, tf, x0, rtol, atol, max_steps, lam0):
    """Realized cost of the characteristic launched with costate ``lam0``."""
    n = ocp.n
    y0 = np.concatenate([x0, lam0, [0.0]])
    ref = max(float(np.linalg.norm(y0[: 2 * n])), 1.0)

    def guard(t, y):
        return not np.linalg.norm(y[: 2 * n]) <= CANDIDATE_GROWTH * ref

    try:
        sol = rk45_adaptive(
            partial(characteristic_rhs, ocp), t0, tf, y0, rtol=rtol, atol=atol, max_steps=max_steps, guard=guard
        )
    except (NonFiniteValue, StepUnderflow, GimbalSingularity, GrowthLimitExceeded, FloatingPointError):
        return np.inf
    yf = sol.final
    # w integrates -L forward from zero
    cost = -float(yf[2 * n]) + float(ocp.terminal_cost(yf[:n]))
    return cost if np.isfinite(cost) else np.inf


def _coordinate_descent(fn, x, sweeps, width):
    fx = fn(x)
    for _ in range(sweeps):
        improved = False
        for i in range(len(x)):
            def line(a, i=i):
                trial = x.copy()
                trial[i] = a
                return fn(trial)

            res = minimize_scalar(line, bracket=(x[i] - width, x[i] + width), options={"xtol": 1e-10})
            if np.isfinite(res.fun) and res.fun < fx:
                x = x.copy()
                x[i] = res.x
                fx = float(res.fun)
                improved = True
        if not improved:
            break
    return x, fx


def char_min_value(
    ocp,
    t0,
    x0,
    tf=None,
    starts=16,
    seed=0,
    box=5.0,
    sweeps=3,
    powell_maxfev=4000,
    xtol=1e-10,
    rtol=1e-10,
    atol=1e-12,
    max_steps=20_000,
):
    """Minimize the realized cost over the initial costate.

    Each start runs Powell's method followed by coordinate descent. The
    first start is ``psi_x(x0)``; the others are uniform in a box of half
    width ``box`` times the size of ``psi_x(x0)`` (or 1 if that vanishes).
    Returns a :class:`CharMinResult`; raises :class:`AllCandidatesFailed`
    when no candidate produces a finite cost.
    """
    tf = ocp.tf if tf is None else float(tf)
    x0 = np.asarray(x0, dtype=float).reshape(ocp.n)
    counts = {"evals": 0, "failed": 0}

    base = partial(_candidate_cost, ocp, float(t0), tf, x0, rtol, atol, max_steps)

    def cost(lam0):
        counts["evals"] += 1
        c = base(np.asarray(lam0, dtype=float))
        if not np.isfinite(c):
            counts["failed"] += 1
        return c

    rng = np.random.default_rng(seed)
    g0 = np.asarray(ocp.terminal_cost_gradient(x0), dtype=float)
    mag = float(np.max(np.abs(g0)))
    scale = box * (mag if mag > 0 else 1.0)
    candidates = [g0] + [rng.uniform(-scale, scale, ocp.n) for _ in range(max(0, starts - 1))]

    best_val, best_lam, history = np.inf, None, []
    converged = False
    for lam_start in candidates:
        f_start = cost(lam_start)
        if not np.isfinite(f_start):
            history.append(np.inf)
            continue
        res = minimize(cost, lam_start, method="Powell", options={"xtol": xtol, "ftol": 1e-14, "maxfev": powell_maxfev})
        lam, val = (res.x, float(res.fun)) if np.isfinite(res.fun) and res.fun <= f_start else (lam_start, f_start)
        lam, val = _coordinate_descent(cost, np.array(lam, dtype=float), sweeps, max(1e-3, 0.1 * scale))
        history.append(val)
        if val < best_val:
            best_val, best_lam = val, lam
            converged = bool(res.success)
    if best_lam is None:
        raise AllCandidatesFailed(f"all {len(candidates)} starts failed to integrate")
    return CharMinResult(best_val, best_lam, counts["evals"], counts["failed"], len(candidates), converged, history)


# ---------------------------------------------------------------- quasilinear PDEs


@dataclass(frozen=True)
class QuasilinearPde:
    """``sum_i a_i(x, u) u_{x_i} = c(x, u)`` with data on a surface.

    ``a(x, u)`` returns an ``n``-vector, ``c(x, u)`` a scalar.
    ``surface(sigma)`` maps ``n - 1`` parameters to a point on the initial
    surface and ``data(sigma)`` gives ``u`` there.
    """

    n: int
    a: object
    c: object
    surface: object
    data: object


def _shoot(pde, sigma, s_end, rtol, atol):
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    z0 = np.append(np.asarray(pde.surface(sigma), dtype=float), float(pde.data(sigma)))

    def rhs(s, z):
        x, u = z[:-1], z[-1]
        return np.append(np.asarray(pde.a(x, u), dtype=float), float(pde.c(x, u)))

    return rk45_adaptive(rhs, 0.0, s_end, z0, rtol=rtol, atol=atol)


def _hit_jacobian(pde, sigma, s, rtol, atol, h=1e-6):
    """Jacobian of ``(sigma, s) -> x`` and the characteristic endpoint."""
    base = _shoot(pde, sigma, s, rtol, atol)
    z = base.final
    cols = []
    for j in range(len(sigma)):
        e = np.zeros(len(sigma))
        e[j] = h
        zp = _shoot(pde, sigma + e, s, rtol, atol).final
        zm = _shoot(pde, sigma - e, s, rtol, atol).final
        cols.append((zp[:-1] - zm[:-1]) / (2 * h))
    cols.append(np.asarray(pde.a(z[:-1], z[-1]), dtype=float))
    return np.column_stack(cols), base


def _det_along(pde, sigma, s_end, rtol, atol, points=16, h=1e-6):
    """Hit-map Jacobian determinants along one characteristic."""
    base = _shoot(pde, sigma, s_end, rtol, atol)
    plus, minus = [], []
    for j in range(len(sigma)):
        e = np.zeros(len(sigma))
        e[j] = h
        plus.append(_shoot(pde, sigma + e, s_end, rtol, atol))
        minus.append(_shoot(pde, sigma - e, s_end, rtol, atol))
    dets = []
    for s in np.linspace(0.0, s_end, points + 1):
        z = base.dense_eval(s)
        cols = [(p.dense_eval(s)[:-1] - m.dense_eval(s)[:-1]) / (2 * h) for p, m in zip(plus, minus)]
        cols.append(np.asarray(pde.a(z[:-1], z[-1]), dtype=float))
        dets.append(np.linalg.det(np.column_stack(cols)))
    return np.array(dets)


def quasilinear_eval(pde, x_target, guesses, tol=1e-10, max_iter=50, rtol=1e-11, atol=1e-13, cond_limit=1e10):
    """Solution value at ``x_target`` by Newton on the characteristic hit map.

    ``guesses`` is a list of ``(sigma, s)`` starting points. Each converged
    root is checked for a sign change of the hit-map Jacobian determinant
    along its characteristic (characteristics have crossed); distinct
    roots with different values also signal a shock.
    """
    x_target = np.asarray(x_target, dtype=float)
    roots = []
    for sigma0, s0 in guesses:
        sigma = np.atleast_1d(np.asarray(sigma0, dtype=float)).copy()
        s = float(s0)
        for _ in range(max_iter):
            try:
                jac, traj = _hit_jacobian(pde, sigma, s, rtol, atol)
            except (NonFiniteValue, StepUnderflow):
                break
            miss = traj.final[:-1] - x_target
            if np.linalg.norm(miss) <= tol * max(1.0, np.linalg.norm(x_target)):
                if np.linalg.cond(jac) > cond_limit:
                    raise ShockDetected(f"hit-map Jacobian is singular at {x_target.tolist()}")
                roots.append((sigma.copy(), s, float(traj.final[-1])))
                break
            # a singular map away from a root means this guess is lost, not a shock
            if np.linalg.cond(jac) > cond_limit:
                break
            step = np.linalg.solve(jac, miss)
            sigma = sigma - step[:-1]
            s = s - step[-1]
    if not roots:
        raise NoCharacteristicFound(f"no characteristic reaches {x_target.tolist()}")
    values = [u for _, _, u in roots]
    if max(values) - min(values) > 1e-6:
        raise ShockDetected(f"characteristics with different values meet at {x_target.tolist()}")
    sigma, s, u = roots[0]
    if s != 0.0:
        dets = _det_along(pde, sigma, s, rtol, atol)
        if np.any(np.sign(dets[1:]) != np.sign(dets[0])) or np.any(dets == 0):
            raise ShockDetected(f"characteristics cross before reaching {x_target.tolist()}")
    return u
