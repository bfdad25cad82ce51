"""Dataset generation by integrating characteristics backward in time.

Terminal states are drawn in a ball around the end of a nominal optimal
trajectory; the terminal costate and cost-to-go follow from the terminal
cost, and the augmented Hamiltonian system is integrated back to ``t0``.
Every accepted integrator step becomes a :class:`~hjbkit.problems.Sample`.
"""

from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .bvp import Trajectory, characteristic_rhs, solve_tpbvp
from .errors import GimbalSingularity, GrowthLimitExceeded, HJBError, NonFiniteValue, StepUnderflow
from .integrate import rk45_adaptive
from .parallel import pmap
from .problems import Sample

__all__ = ["BackwardReport", "generate_backward", "DatasetRejected"]

GROWTH_LIMIT = 1e3


class DatasetRejected(HJBError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class BackwardReport:
    requested: int
    kept: int = 0
    truncated: int = 0
    discarded: int = 0
    samples: int = 0
    checked: int = 0
    disagreements: int = 0
    max_check_error: float = 0.0
    check_errors: list = field(default_factory=list)

    def as_dict(self):
        d = dict(self.__dict__)
        d["check_errors"] = list(map(float, self.check_errors))
        return d


def _ball(rng, n, radius):
    g = rng.standard_normal(n)
    norm = np.linalg.norm(g)
    if norm == 0:
        return np.zeros(n)
    return g / norm * radius * rng.uniform() ** (1.0 / n)


def _integrate_one(ocp, t0, tf, rtol, atol, xT):
    """Backward characteristic from terminal state ``xT``.

    Returns ``(status, OdeSolution or None)``; ``status`` is ``"kept"``,
    ``"truncated"`` (growth guard tripped; the accurate part is returned)
    or ``"discarded"``.
    """
    n = ocp.n
    yT = np.concatenate([xT, ocp.terminal_cost_gradient(xT), [float(ocp.terminal_cost(xT))]])
    ref = max(np.linalg.norm(yT[: 2 * n]), 1e-12)
    rhs = partial(characteristic_rhs, ocp)
    record = {}

    def guard(t, y):
        if np.linalg.norm(y[: 2 * n]) > GROWTH_LIMIT * ref:
            return True
        record["t"] = t
        return False

    try:
        sol = rk45_adaptive(rhs, tf, t0, yT, rtol=rtol, atol=atol, guard=guard)
        return "kept", sol
    except (GrowthLimitExceeded, GimbalSingularity) as exc:
        # integrate again, stopping at the last time the guard accepted
        t_stop = record.get("t")
        if t_stop is None or t_stop >= tf:
            return "discarded", None
        try:
            sol = rk45_adaptive(rhs, tf, t_stop, yT, rtol=rtol, atol=atol)
        except (NonFiniteValue, StepUnderflow, GimbalSingularity):
            return "discarded", None
        return "truncated", sol
    except (NonFiniteValue, StepUnderflow):
        return "discarded", None


def _samples_from(ocp, sol):
    n = ocp.n
    out = []
    for k, t in enumerate(sol.mesh):
        y = sol.states[:, k]
        out.append(Sample(float(t), y[:n].copy(), float(y[2 * n]), y[n : 2 * n].copy(), "backward"))
    return out


def _check_one(ocp, item):
    sample, traj = item
    tf = float(traj.mesh[-1])
    # the backward trajectory itself is an excellent guess on [t, tf]
    keep = traj.mesh >= sample.t
    mesh = traj.mesh[keep]
    guess = Trajectory(mesh, traj.states[:, keep], traj.derivs[:, keep])
    try:
        sol = solve_tpbvp(ocp, sample.t, sample.x, guess=guess, tf=tf)
    except (HJBError, FloatingPointError):
        return np.inf
    return abs(sol.value - sample.v) / max(abs(sol.value), 1e-12)


def generate_backward(
    ocp,
    nominal,
    count,
    radius,
    rng_seed=0,
    rtol=1e-10,
    atol=1e-12,
    verify_fraction=0.05,
    check_tol=1e-3,
    max_disagree=0.01,
    workers=1,
):
    """Sample optimal trajectories around ``nominal`` by backward integration.

    Returns ``(samples, trajectories, report)``. One interior sample from a
    ``verify_fraction`` of the trajectories is re-solved as boundary value problems; if more than
    ``max_disagree`` of them differ by more than ``check_tol`` (relative)
    the whole set is rejected with :class:`DatasetRejected`.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    rng = np.random.default_rng(rng_seed)
    xT_nom = np.asarray(nominal.x[:, -1], dtype=float)
    t0, tf = float(nominal.mesh[0]), float(nominal.mesh[-1])
    terminals = [xT_nom + _ball(rng, ocp.n, radius) for _ in range(count)]

    results = pmap(partial(_integrate_one, ocp, t0, tf, rtol, atol), terminals, workers)
    report = BackwardReport(requested=count)
    samples, trajectories = [], []
    for status, sol in results:
        if status == "discarded":
            report.discarded += 1
            continue
        if status == "truncated":
            report.truncated += 1
        else:
            report.kept += 1
        new = _samples_from(ocp, sol)
        samples.extend(new)
        trajectories.append(sol)
    report.samples = len(samples)

    # One check per verified trajectory: samples along a trajectory are
    # strongly correlated, and terminal samples are exact by construction.
    if verify_fraction > 0 and trajectories:
        k = min(len(trajectories), max(1, int(np.ceil(verify_fraction * len(trajectories)))))
        chosen = np.sort(rng.choice(len(trajectories), size=k, replace=False))
        items = []
        for j in chosen:
            traj = trajectories[j]
            inner = np.flatnonzero(traj.mesh < traj.mesh[-1] - 1e-9 * (tf - t0))
            if inner.size:
                i = int(rng.choice(inner))
                items.append((Sample(float(traj.mesh[i]), traj.states[: ocp.n, i].copy(),
                                     float(traj.states[2 * ocp.n, i]), traj.states[ocp.n : 2 * ocp.n, i].copy(),
                                     "backward"), traj))
        k = len(items)
        errors = pmap(partial(_check_one, ocp), items, workers)
        report.checked = k
        report.check_errors = list(errors)
        report.disagreements = int(sum(e > check_tol for e in errors))
        report.max_check_error = float(max(errors, default=0.0))
        if report.disagreements > max_disagree * k:
            raise DatasetRejected(
                f"{report.disagreements} of {k} verification solves disagree by more than {check_tol}",
                report,
            )
    return samples, trajectories, report
