"""Collocation solver for the characteristic boundary value problem.

Unknowns are ``y = (x, lam, w)`` where ``w`` is the cost-to-go::

    xdot   = f(t, x, u*)          x(t0)   = x0
    lamdot = -H_x(t, x, lam, u*)   lam(tf) = psi_x(x(tf))
    wdot   = -L(t, x, u*)          w(tf)   = psi(x(tf))

so that ``w(t0) = V(t0, x0)`` and ``lam(t0) = V_x(t0, x0)``.

The discretization is three-stage Lobatto IIIa collocation (fourth order)
on a nonuniform mesh, solved by damped Newton iteration with a sparse
block-bidiagonal Jacobian. The mesh is refined by bisecting intervals where
the RMS residual of the cubic interpolant is largest.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    GimbalSingularity,
    MaxIterations,
    MeshLimitExceeded,
    NonFiniteValue,
    SingularJacobian,
)
from .integrate import hermite_eval

__all__ = [
    "BvpSolution",
    "SolveReport",
    "Trajectory",
    "characteristic_rhs",
    "rhs_jacobian",
    "collocation_residual",
    "constant_guess",
    "solve_tpbvp",
]

DEFAULT_TOL = 1e-8
DEFAULT_RESIDUAL_TOL = 1e-6
DEFAULT_INTERVALS = 32
MAX_NODES = 10_000
MAX_HALVINGS = 8

# interior 5-point Lobatto abscissae on [0, 1]
_LOB = 0.5 * np.sqrt(3.0 / 7.0)
_LOB_POINTS = np.array([0.5 - _LOB, 0.5 + _LOB])


def characteristic_rhs(ocp, t, y):
    """Right-hand side of the augmented Hamiltonian system."""
    n = ocp.n
    y = np.asarray(y, dtype=float)
    x, lam = y[:n], y[n : 2 * n]
    u = ocp.optimal_control(t, x, lam)
    xdot = np.asarray(ocp.dynamics(t, x, u), dtype=float)
    lamdot = np.asarray(ocp.costate_rhs(t, x, lam), dtype=float)
    wdot = -np.asarray(ocp.running_cost(t, x, u), dtype=float)
    return np.concatenate([xdot, lamdot, wdot[None]], axis=0)


def _as_rhs(fun):
    if callable(getattr(fun, "dynamics", None)):
        return lambda t, y: characteristic_rhs(fun, t, y)
    return fun


def rhs_jacobian(fun, t, Y, active=None):
    """Central-difference Jacobian ``dF/dy`` at every column of ``Y``.

    All perturbed points are evaluated in one vectorized call. Components
    not listed in ``active`` are assumed not to influence ``F``.
    Returns shape ``(d, d, P)``.
    """
    d, P = Y.shape
    active = range(d) if active is None else active
    active = list(active)
    na = len(active)
    step = 6e-6 * (1.0 + np.abs(Y[active]))  # (na, P)
    big = np.repeat(Y[:, None, None, :], na, axis=1).repeat(2, axis=2)  # (d, na, 2, P)
    for a, j in enumerate(active):
        big[j, a, 0] += step[a]
        big[j, a, 1] -= step[a]
    tt = np.broadcast_to(np.asarray(t, dtype=float), (P,))
    tt = np.broadcast_to(tt, (na, 2, P)).reshape(-1)
    Fb = fun(tt, big.reshape(d, -1)).reshape(d, na, 2, P)
    jac = np.zeros((d, d, P))
    jac[:, active, :] = (Fb[:, :, 0] - Fb[:, :, 1]) / (2.0 * step[None])
    return jac


def _collocation(fun, mesh, Y, F=None):
    h = np.diff(mesh)
    if F is None:
        F = fun(mesh, Y)
    tmid = mesh[:-1] + 0.5 * h
    Ymid = 0.5 * (Y[:, :-1] + Y[:, 1:]) - h / 8.0 * (F[:, 1:] - F[:, :-1])
    Fmid = fun(tmid, Ymid)
    R = Y[:, 1:] - Y[:, :-1] - h / 6.0 * (F[:, :-1] + 4.0 * Fmid + F[:, 1:])
    return R, F, Ymid, Fmid


def collocation_residual(fun, mesh, Y):
    """Scaled max-norm of the Lobatto IIIa collocation equations.

    ``fun`` is an :class:`~hjbkit.problems.OcpDefinition` (the augmented
    characteristic system is used) or a vectorized ``f(t, Y)``.
    """
    mesh = np.asarray(mesh, dtype=float)
    if np.any(np.diff(mesh) <= 0):
        raise ValueError("mesh must be strictly increasing")
    fun = _as_rhs(fun)
    Y = np.asarray(Y, dtype=float)
    R, _, _, Fmid = _collocation(fun, mesh, Y)
    h = np.diff(mesh)
    return float(np.max(np.abs(R) / (h * (1.0 + np.abs(Fmid)))))


class Trajectory:
    """Sampled trajectory ``Y`` (shape ``(d, len(mesh))``) usable as a guess.

    Evaluation is cubic Hermite when derivatives are known, else linear.
    """

    def __init__(self, mesh, Y, F=None):
        self.mesh = np.asarray(mesh, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        self.F = None if F is None else np.asarray(F, dtype=float)

    @property
    def t0(self):
        return float(self.mesh[0])

    @property
    def tf(self):
        return float(self.mesh[-1])

    def __call__(self, t):
        if len(self.mesh) == 1:
            t = np.asarray(t, dtype=float)
            return np.broadcast_to(self.Y[:, :1], (self.Y.shape[0],) + t.shape[:1] if t.ndim else (self.Y.shape[0],)).copy()
        if self.F is not None:
            return hermite_eval(self.mesh, self.Y, self.F, t)
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.array([np.interp(t_arr, self.mesh, row) for row in self.Y])
        return out[:, 0] if np.ndim(t) == 0 else out


@dataclass
class SolveReport:
    converged: bool
    newton_iterations: int
    final_residual: float
    mesh_points: int
    wall_time: float
    tolerance: float = DEFAULT_RESIDUAL_TOL
    order: int = 4
    message: str = ""

    def as_dict(self):
        return {
            "converged": self.converged,
            "newton_iterations": self.newton_iterations,
            "final_residual": self.final_residual,
            "mesh_points": self.mesh_points,
            "wall_time": self.wall_time,
            "tolerance": self.tolerance,
            "order": self.order,
            "message": self.message,
        }


class BvpSolution(Trajectory):
    """Converged characteristic on ``[t0, tf]`` with a solve report."""

    def __init__(self, n, mesh, Y, F, report):
        super().__init__(mesh, Y, F)
        self.n = n
        self.report = report

    @property
    def x(self):
        return self.Y[: self.n]

    @property
    def lam(self):
        return self.Y[self.n : 2 * self.n]

    @property
    def w(self):
        return self.Y[2 * self.n]

    @property
    def value(self):
        """``V(t0, x0) = w(t0)``."""
        return float(self.Y[2 * self.n, 0])

    @property
    def costate(self):
        """``lam(t0)``."""
        return self.Y[self.n : 2 * self.n, 0].copy()

    def hamiltonian(self, ocp):
        x, lam = self.x, self.lam
        u = ocp.optimal_control(self.mesh, x, lam)
        return np.asarray(ocp.hamiltonian(self.mesh, x, lam, u), dtype=float)


def constant_guess(ocp, x0):
    """``x = x0``, ``lam = psi_x(x0)``, ``w = psi(x0)`` on the whole horizon."""
    x0 = np.asarray(x0, dtype=float)
    y = np.concatenate([x0, ocp.terminal_cost_gradient(x0), [float(ocp.terminal_cost(x0))]])

    def guess(t):
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return y.copy()
        return np.repeat(y[:, None], t.size, axis=1)

    return guess


def _safe_eval(fun, t, Y):
    try:
        F = fun(t, Y)
    except (GimbalSingularity, NonFiniteValue, FloatingPointError, ZeroDivisionError):
        return None
    if not np.all(np.isfinite(F)):
        return None
    return F


class _System:
    """Collocation equations plus boundary conditions on a fixed mesh."""

    def __init__(self, ocp, fun, mesh, x0):
        self.ocp = ocp
        self.fun = fun
        self.mesh = mesh
        self.x0 = x0
        self.n = ocp.n
        self.d = 2 * ocp.n + 1
        self.active = list(range(2 * ocp.n))

    def residual(self, Y):
        """Returns (residual vector, weights, parts) or None when not finite."""
        n, d = self.n, self.d
        F = _safe_eval(self.fun, self.mesh, Y)
        if F is None:
            return None
        h = np.diff(self.mesh)
        tmid = self.mesh[:-1] + 0.5 * h
        Ymid = 0.5 * (Y[:, :-1] + Y[:, 1:]) - h / 8.0 * (F[:, 1:] - F[:, :-1])
        Fmid = _safe_eval(self.fun, tmid, Ymid)
        if Fmid is None:
            return None
        R = Y[:, 1:] - Y[:, :-1] - h / 6.0 * (F[:, :-1] + 4.0 * Fmid + F[:, 1:])
        xf = Y[:n, -1]
        try:
            psi_x = np.asarray(self.ocp.terminal_cost_gradient(xf), dtype=float)
            psi = float(self.ocp.terminal_cost(xf))
        except (NonFiniteValue, FloatingPointError):
            return None
        bc = np.concatenate([Y[:n, 0] - self.x0, Y[n : 2 * n, -1] - psi_x, [Y[2 * n, -1] - psi]])
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(bc))):
            return None
        wcol = h * (1.0 + np.abs(Fmid))
        wbc = 1.0 + np.abs(np.concatenate([Y[:n, 0], Y[n : 2 * n, -1], [Y[2 * n, -1]]]))
        r = np.concatenate([R.T.ravel(), bc])
        wts = np.concatenate([wcol.T.ravel(), wbc])
        return r, wts, (F, Ymid, Fmid)

    def jacobian(self, Y, parts):
        n, d = self.n, self.d
        F, Ymid, Fmid = parts
        mesh = self.mesh
        M = len(mesh) - 1
        h = np.diff(mesh)
        tmid = mesh[:-1] + 0.5 * h
        # one vectorized evaluation for nodes and midpoints
        Tall = np.concatenate([mesh, tmid])
        Yall = np.concatenate([Y, Ymid], axis=1)
        Jall = rhs_jacobian(self.fun, Tall, Yall, self.active)
        Jn = np.moveaxis(Jall[:, :, : M + 1], -1, 0)  # (M+1, d, d)
        Jm = np.moveaxis(Jall[:, :, M + 1 :], -1, 0)  # (M, d, d)
        eye = np.eye(d)
        hh = h[:, None, None]
        Ji, Jip = Jn[:-1], Jn[1:]
        A = -eye - hh / 6.0 * (Ji + 4.0 * Jm @ (0.5 * eye + hh / 8.0 * Ji))
        Bm = eye - hh / 6.0 * (Jip + 4.0 * Jm @ (0.5 * eye - hh / 8.0 * Jip))
        blocks = np.concatenate([A, Bm], axis=2)  # (M, d, 2d)
        rows = np.arange(M)[:, None, None] * d + np.arange(d)[None, :, None]
        cols = np.arange(M)[:, None, None] * d + np.arange(2 * d)[None, None, :]
        rows = np.broadcast_to(rows, blocks.shape).ravel()
        cols = np.broadcast_to(cols, blocks.shape).ravel()
        vals = blocks.ravel()
        # boundary rows
        xf = Y[:n, -1]
        hs = 6e-6 * (1.0 + np.abs(xf))
        psixx = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = hs[j]
            psixx[:, j] = (
                np.asarray(self.ocp.terminal_cost_gradient(xf + e)) - np.asarray(self.ocp.terminal_cost_gradient(xf - e))
            ) / (2 * hs[j])
        psix = np.asarray(self.ocp.terminal_cost_gradient(xf), dtype=float)
        base = M * d
        last = M * d
        br, bcl, bv = [], [], []
        for i in range(n):
            br.append(base + i)
            bcl.append(i)
            bv.append(1.0)
        for i in range(n):
            br.extend([base + n + i] * (n + 1))
            bcl.extend([last + j for j in range(n)] + [last + n + i])
            bv.extend(list(-psixx[i]) + [1.0])
        br.extend([base + 2 * n] * (n + 1))
        bcl.extend([last + j for j in range(n)] + [last + 2 * n])
        bv.extend(list(-psix) + [1.0])
        rows = np.concatenate([rows, br])
        cols = np.concatenate([cols, bcl])
        vals = np.concatenate([vals, bv])
        size = (M + 1) * d
        return sp.csc_matrix((vals, (rows, cols)), shape=(size, size))


def _newton(system, Y, tol, max_iter):
    """Damped Newton on a fixed mesh. Returns (Y, iterations, parts)."""
    d = system.d
    res = system.residual(Y)
    if res is None:
        raise NonFiniteValue("initial guess produces non-finite residuals")
    r, wts, parts = res
    for it in range(max_iter + 1):
        scaled = np.max(np.abs(r) / wts)
        if scaled <= tol:
            return Y, it, parts
        if it == max_iter:
            break
        A = system.jacobian(Y, parts)
        try:
            with np.errstate(all="ignore"):
                step = spla.splu(A).solve(-r)
        except RuntimeError as exc:
            raise SingularJacobian(str(exc)) from None
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("Newton step is not finite")
        dY = step.reshape(-1, d).T
        merit = np.sum((r / wts) ** 2)
        alpha = 1.0
        for _ in range(MAX_HALVINGS + 1):
            Yt = Y + alpha * dY
            trial = system.residual(Yt)
            if trial is not None:
                mt = np.sum((trial[0] / wts) ** 2)
                if mt < (1.0 - 1e-4 * alpha) * merit:
                    break
            alpha *= 0.5
        else:
            raise MaxIterations(f"Newton stalled after {it + 1} iterations (line search failed)")
        Y = Yt
        r, wts, parts = trial
    raise MaxIterations(f"Newton did not converge in {max_iter} iterations (residual {scaled:.3e})")


def _interval_residuals(fun, mesh, Y, F):
    """RMS relative residual of the cubic Hermite interpolant on each interval."""
    h = np.diff(mesh)
    d = Y.shape[0]
    ts, Ss, Sps = [], [], []
    for s in _LOB_POINTS:
        s2, s3 = s * s, s**3
        S = (
            (2 * s3 - 3 * s2 + 1) * Y[:, :-1]
            + (s3 - 2 * s2 + s) * h * F[:, :-1]
            + (-2 * s3 + 3 * s2) * Y[:, 1:]
            + (s3 - s2) * h * F[:, 1:]
        )
        Sp = (
            (6 * s2 - 6 * s) / h * Y[:, :-1]
            + (3 * s2 - 4 * s + 1) * F[:, :-1]
            + (-6 * s2 + 6 * s) / h * Y[:, 1:]
            + (3 * s2 - 2 * s) * F[:, 1:]
        )
        ts.append(mesh[:-1] + s * h)
        Ss.append(S)
        Sps.append(Sp)
    Fs = fun(np.concatenate(ts), np.concatenate(Ss, axis=1))
    M = len(h)
    r2 = 0.0
    for k in range(2):
        f = Fs[:, k * M : (k + 1) * M]
        r = (Sps[k] - f) / (1.0 + np.abs(f))
        r2 = r2 + np.sum(r * r, axis=0)
    return np.sqrt(0.5 * 49.0 / 90.0 * r2)


def _bisect(mesh, Y, F, which):
    new_t = mesh[:-1][which] + 0.5 * np.diff(mesh)[which]
    mesh2 = np.sort(np.concatenate([mesh, new_t]))
    Y2 = hermite_eval(mesh, Y, F, mesh2)
    return mesh2, Y2


def _initial_mesh(guess, t0, tf, intervals):
    gm = getattr(guess, "mesh", None)
    if gm is not None and len(gm) >= 2 and abs(gm[0] - t0) < 1e-12 * max(1.0, abs(t0)) and abs(gm[-1] - tf) < 1e-12 * max(1.0, abs(tf)):
        mesh = np.array(gm, dtype=float)
        mesh[0], mesh[-1] = t0, tf
        return mesh
    return np.linspace(t0, tf, intervals + 1)


def solve_tpbvp(
    ocp,
    t0,
    x0,
    guess=None,
    tol=DEFAULT_TOL,
    residual_tol=DEFAULT_RESIDUAL_TOL,
    tf=None,
    mesh=None,
    intervals=DEFAULT_INTERVALS,
    max_newton=30,
    max_nodes=MAX_NODES,
    refine_fraction=0.2,
):
    """Solve the characteristic boundary value problem from ``(t0, x0)``.

    Parameters
    ----------
    guess : callable or Trajectory, optional
        Maps an array of times to ``(2n+1, len(t))`` values of
        ``(x, lam, w)``. If it exposes a ``mesh`` spanning ``[t0, tf]`` that
        mesh is reused. Defaults to :func:`constant_guess`.
    tol : float
        Newton tolerance on the scaled collocation and boundary equations.
    residual_tol : float
        Mesh refinement stops when every interval's RMS relative interpolant
        residual is below this value.

    Raises
    ------
    MaxIterations, SingularJacobian, MeshLimitExceeded, NonFiniteValue
    """
    start = time.perf_counter()
    t0 = float(t0)
    tf = ocp.tf if tf is None else float(tf)
    if tf <= t0:
        raise ValueError("tf must exceed t0")
    if tol <= 0 or residual_tol <= 0:
        raise ValueError("tolerances must be positive")
    x0 = np.asarray(x0, dtype=float).reshape(ocp.n)
    if guess is None:
        guess = constant_guess(ocp, x0)
    fun = _as_rhs(ocp)
    mesh = np.asarray(mesh, dtype=float) if mesh is not None else _initial_mesh(guess, t0, tf, intervals)
    Y = np.array(guess(mesh), dtype=float).reshape(2 * ocp.n + 1, len(mesh))
    Y[: ocp.n, 0] = x0
    total_iter = 0
    while True:
        system = _System(ocp, fun, mesh, x0)
        Y, iters, parts = _newton(system, Y, tol, max_newton)
        total_iter += iters
        F = parts[0]
        est = _interval_residuals(fun, mesh, Y, F)
        worst = float(np.max(est))
        if worst <= residual_tol:
            break
        bad = np.flatnonzero(est > residual_tol)
        cap = max(1, math.ceil(refine_fraction * (len(mesh) - 1)))
        if len(bad) > cap:
            bad = bad[np.argsort(est[bad])[::-1][:cap]]
        if len(mesh) + len(bad) > max_nodes:
            raise MeshLimitExceeded(f"mesh would exceed {max_nodes} points (residual {worst:.3e})")
        mesh, Y = _bisect(mesh, Y, F, np.sort(bad))
    report = SolveReport(
        converged=True,
        newton_iterations=total_iter,
        final_residual=worst,
        mesh_points=len(mesh),
        wall_time=time.perf_counter() - start,
        tolerance=residual_tol,
    )
    return BvpSolution(ocp.n, mesh, Y, F, report)
