"""Explicit Runge-Kutta integration, forward or backward in time.

Backward integration maps ``s = -t`` and integrates forward in ``s``, so a
single stepping loop serves both directions. Results are always returned on
an ascending mesh.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GrowthLimitExceeded, NonFiniteValue, StepUnderflow

__all__ = ["OdeSolution", "rk4", "rk45_adaptive", "hermite_eval"]


def hermite_eval(mesh, states, derivs, t):
    """Piecewise cubic Hermite interpolation.

    ``states`` and ``derivs`` have shape ``(k, len(mesh))``. Returns shape
    ``(k,)`` for scalar ``t`` and ``(k, len(t))`` otherwise.
    """
    mesh = np.asarray(mesh)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    i = np.clip(np.searchsorted(mesh, t, side="right") - 1, 0, len(mesh) - 2)
    h = mesh[i + 1] - mesh[i]
    s = (t - mesh[i]) / h
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    y = (
        h00 * states[:, i]
        + h10 * h * derivs[:, i]
        + h01 * states[:, i + 1]
        + h11 * h * derivs[:, i + 1]
    )
    # exact reproduction at mesh points
    hit = mesh[i] == t
    if np.any(hit):
        y[:, hit] = states[:, i[hit]]
    hit = mesh[i + 1] == t
    if np.any(hit):
        y[:, hit] = states[:, i[hit] + 1]
    return y[:, 0] if scalar else y


@dataclass
class OdeSolution:
    """Integrated trajectory on an ascending mesh.

    ``states`` and ``derivs`` have shape ``(k, len(mesh))``; ``t_start`` and
    ``t_end`` keep the direction of integration.
    """

    mesh: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    t_start: float
    t_end: float
    accepted_steps: int = 0
    rejected_steps: int = 0

    def dense_eval(self, t):
        return hermite_eval(self.mesh, self.states, self.derivs, t)

    __call__ = dense_eval

    @property
    def final(self):
        """State at ``t_end``."""
        return self.states[:, -1] if self.t_end >= self.t_start else self.states[:, 0]

    @property
    def initial(self):
        return self.states[:, 0] if self.t_end >= self.t_start else self.states[:, -1]


def _reparam(f, t_start, t_end):
    if t_end >= t_start:
        return f, t_start, t_end, 1.0
    return (lambda s, x: -np.asarray(f(-s, x))), -t_start, -t_end, -1.0


def _finish(ts, xs, fs, sign, t_start, t_end, accepted=0, rejected=0):
    ts = np.asarray(ts) * sign
    xs = np.array(xs).T
    fs = np.array(fs).T * sign
    if sign < 0:
        ts, xs, fs = ts[::-1], xs[:, ::-1], fs[:, ::-1]
    return OdeSolution(ts, xs, fs, float(t_start), float(t_end), accepted, rejected)


def _check(x, t):
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue(f"non-finite state at t = {t:.6g}", where=t)


def rk4(f, t_start, t_end, x0, steps):
    """Classical fourth-order Runge-Kutta with ``steps`` equal steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    g, s0, s1, sign = _reparam(f, t_start, t_end)
    x = np.array(x0, dtype=float)
    h = (s1 - s0) / steps
    ts, xs, fs = [s0], [x.copy()], []
    s = s0
    k1 = np.asarray(g(s, x), dtype=float)
    for i in range(steps):
        fs.append(k1)
        k2 = g(s + h / 2, x + h / 2 * k1)
        k3 = g(s + h / 2, x + h / 2 * k2)
        k4 = g(s + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        s = s0 + (i + 1) * h
        _check(x, s * sign)
        ts.append(s)
        xs.append(x)
        k1 = np.asarray(g(s, x), dtype=float)
    fs.append(k1)
    return _finish(ts, xs, fs, sign, t_start, t_end, steps, 0)


# Dormand-Prince 5(4)
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def rk45_adaptive(f, t_start, t_end, x0, rtol=1e-8, atol=1e-10, max_steps=100_000, guard=None):
    """Dormand-Prince 5(4) with local error control.

    A step is accepted when the RMS of ``err / (atol + rtol * max(|x|, |x_new|))``
    is at most one. ``guard(t, x)`` may return True to abort the integration
    (raises :class:`GrowthLimitExceeded`).
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    g, s0, s1, sign = _reparam(f, t_start, t_end)
    span = s1 - s0
    x = np.array(x0, dtype=float)
    _check(x, t_start)
    if span == 0:
        fx = np.asarray(g(s0, x), dtype=float)
        return _finish([s0], [x], [fx], sign, t_start, t_end)
    h = 1e-3 * span
    h_min = 1e-14 * span
    s = s0
    k = [np.asarray(g(s, x), dtype=float)] + [None] * 6
    ts, xs, fs = [s], [x.copy()], [k[0]]
    accepted = rejected = 0
    while s < s1:
        if accepted + rejected >= max_steps:
            raise StepUnderflow(f"max_steps exceeded at t = {s * sign:.6g}", where=s * sign)
        h = min(h, s1 - s)
        for i in range(1, 7):
            xi = x + h * sum(a * kj for a, kj in zip(_A[i], k[:i]) if a != 0)
            k[i] = np.asarray(g(s + _C[i] * h, xi), dtype=float)
        x_new = x + h * sum(b * kj for b, kj in zip(_B5, k) if b != 0)
        if not np.all(np.isfinite(x_new)):
            rejected += 1
            h *= 0.5
            if h < h_min:
                raise NonFiniteValue(f"non-finite state near t = {s * sign:.6g}", where=s * sign)
            continue
        err = h * sum(e * kj for e, kj in zip(_E, k) if e != 0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        en = np.sqrt(np.mean((err / scale) ** 2))
        if en <= 1.0:
            s = s + h if s1 - s > h else s1
            x = x_new
            accepted += 1
            ts.append(s)
            xs.append(x.copy())
            # FSAL: last stage is the derivative at the new point
            k[0] = k[6]
            fs.append(k[0])
            if guard is not None and guard(s * sign, x):
                raise GrowthLimitExceeded(f"growth guard tripped at t = {s * sign:.6g}", where=s * sign)
            fac = 5.0 if en == 0 else min(5.0, max(0.2, 0.9 * en ** -0.2))
            h *= fac
        else:
            rejected += 1
            h *= min(0.5, max(0.1, 0.9 * en ** -0.2))
            if h < h_min:
                raise StepUnderflow(f"step size underflow at t = {s * sign:.6g}", where=s * sign)
    return _finish(ts, xs, fs, sign, t_start, t_end, accepted, rejected)
