"""Continuation in the horizon length.

Solve on a short horizon ``[t0, t1]`` from a constant guess, then stretch or
extend each converged solution as the guess for the next, longer horizon
until ``tf`` is reached.
"""

import time
from dataclasses import dataclass

import numpy as np

from .bvp import DEFAULT_INTERVALS, Trajectory, constant_guess, solve_tpbvp
from .errors import ContinuationFailed, NonFiniteValue, SolverError

__all__ = ["MarchSchedule", "extend_piecewise", "extend_linear", "march", "EXTENSIONS"]


@dataclass(frozen=True)
class MarchSchedule:
    """Horizon schedule: explicit ``times`` or a geometric growth policy.

    With the policy, the first horizon is ``t0 + initial_frac * (tf - t0)``
    and each later increment is ``factor`` times the previous one, capped
    at ``tf``. After a failed solve the increment is halved, at most
    ``max_retries`` times in a row.
    """

    times: tuple = None
    initial_frac: float = 0.05
    factor: float = 2.0
    max_retries: int = 6

    def __post_init__(self):
        if self.times is not None:
            times = tuple(float(t) for t in self.times)
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("schedule times must be strictly increasing")
            object.__setattr__(self, "times", times)
        if not 0 < self.initial_frac <= 1:
            raise ValueError("initial_frac must lie in (0, 1]")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def first(self, t0, tf):
        if self.times is not None:
            return self.times[0]
        return min(tf, t0 + self.initial_frac * (tf - t0))

    def next(self, t0, tf, current, last_increment):
        if self.times is not None:
            later = [t for t in self.times if t > current + 1e-12]
            return later[0] if later else tf
        return min(tf, current + self.factor * last_increment)


def _sol_parts(sol):
    F = getattr(sol, "F", None)
    return np.asarray(sol.mesh, dtype=float), np.asarray(sol.Y, dtype=float), F


def _extension_mesh(t_k, t_next, density):
    count = max(2, int(np.ceil((t_next - t_k) * density)))
    return np.linspace(t_k, t_next, count + 1)[1:]


def extend_piecewise(sol, t_next, density=None):
    """Keep ``sol`` on its interval and freeze it at ``sol(t_k)`` beyond."""
    mesh, Y, F = _sol_parts(sol)
    t_k = mesh[-1]
    if t_next <= t_k:
        raise ValueError("t_next must exceed the current horizon")
    if density is None:
        density = DEFAULT_INTERVALS / (t_next - mesh[0])
    tail = _extension_mesh(t_k, t_next, density)
    new_mesh = np.concatenate([mesh, tail])
    new_Y = np.concatenate([Y, np.repeat(Y[:, -1:], len(tail), axis=1)], axis=1)
    new_F = None
    if F is not None:
        # derivative of the frozen tail is zero; keep the old part exact
        new_F = np.concatenate([F, np.zeros((Y.shape[0], len(tail)))], axis=1)
    return _PiecewiseGuess(sol, t_k, new_mesh, new_Y, new_F)


class _PiecewiseGuess(Trajectory):
    def __init__(self, sol, t_k, mesh, Y, F):
        super().__init__(mesh, Y, F)
        self._sol = sol
        self._t_k = t_k
        self._y_k = np.asarray(sol.Y)[:, -1]

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.repeat(self._y_k[:, None], t_arr.size, axis=1)
        inside = t_arr <= self._t_k
        if np.any(inside):
            out[:, inside] = np.asarray(self._sol(t_arr[inside])).reshape(len(self._y_k), -1)
        return out[:, 0] if np.ndim(t) == 0 else out


def extend_linear(sol, t_next):
    """Stretch ``sol`` over ``[t0, t_next]`` by rescaling time."""
    mesh, Y, F = _sol_parts(sol)
    t0, t_k = mesh[0], mesh[-1]
    if t_next <= t_k:
        raise ValueError("t_next must exceed the current horizon")
    ratio = (t_k - t0) / (t_next - t0)
    new_mesh = t0 + (mesh - t0) / ratio
    new_mesh[-1] = t_next
    new_F = None if F is None else F * ratio
    return _LinearGuess(sol, t0, ratio, new_mesh, Y.copy(), new_F)


class _LinearGuess(Trajectory):
    def __init__(self, sol, t0, ratio, mesh, Y, F):
        super().__init__(mesh, Y, F)
        self._sol = sol
        self._t0 = t0
        self._ratio = ratio

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        s = self._t0 + self._ratio * (t - self._t0)
        s = np.clip(s, self._sol.mesh[0], self._sol.mesh[-1])
        return self._sol(s)


EXTENSIONS = {"piecewise": extend_piecewise, "linear": extend_linear}


def march(ocp, t0, x0, schedule=None, extension="piecewise", tf=None, **solver_kw):
    """Time-marching continuation up to ``tf`` (default ``ocp.tf``).

    Raises :class:`ContinuationFailed` carrying the longest horizon solved
    when a step fails ``schedule.max_retries`` times in a row.
    """
    schedule = schedule or MarchSchedule()
    extend = EXTENSIONS[extension] if isinstance(extension, str) else extension
    t0 = float(t0)
    tf = ocp.tf if tf is None else float(tf)
    x0 = np.asarray(x0, dtype=float)
    start = time.perf_counter()
    total_iter = 0

    horizon = schedule.first(t0, tf)
    if horizon <= t0:
        raise ValueError("first horizon must exceed t0")
    guess = constant_guess(ocp, x0)
    sol = None
    reached = t0
    increment = horizon - t0
    retries = 0
    while True:
        try:
            attempt = solve_tpbvp(ocp, t0, x0, guess=guess, tf=horizon, **solver_kw)
        except (SolverError, NonFiniteValue) as exc:
            retries += 1
            if retries > schedule.max_retries:
                raise ContinuationFailed(
                    f"time marching stalled at horizon {reached:.6g}: {exc}", horizon_reached=reached
                ) from exc
            increment *= 0.5
            horizon = reached + increment
            guess = constant_guess(ocp, x0) if sol is None else extend(sol, horizon)
            continue
        sol = attempt
        total_iter += attempt.report.newton_iterations
        reached = horizon
        retries = 0
        if horizon >= tf:
            break
        new_horizon = schedule.next(t0, tf, horizon, increment)
        increment = new_horizon - horizon
        horizon = new_horizon
        guess = extend(sol, horizon)
    sol.report.newton_iterations = total_iter
    sol.report.wall_time = time.perf_counter() - start
    return sol
