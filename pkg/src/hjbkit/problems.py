"""Deterministic optimal control problems.

All model functions are vectorized with the component axis first: a state
batch has shape ``(n, M)``, a control batch ``(m, M)``, and scalar outputs
have shape ``(M,)``. Plain ``(n,)`` vectors work too. The functions are
written with numpy ufuncs so that :mod:`hjbkit.dual` can differentiate them.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .dual import Dual, dual_diff, stack, value_of
from .errors import ConfigError, GimbalSingularity

__all__ = [
    "OcpDefinition",
    "Sample",
    "RigidBodyParams",
    "RigidBodyProblem",
    "LqrProblem",
    "euler_kinematics",
    "skew",
    "rotation",
    "rigid_body_rhs",
    "rigid_body_optimal_control",
    "rigid_body_costate_rhs",
    "lqr_test_problem",
    "get_problem",
    "PROBLEMS",
]

GIMBAL_GUARD = 1e-6


@dataclass(frozen=True)
class Sample:
    """One supervised record: value ``v`` and costate ``lam`` at ``(t, x)``."""

    t: float
    x: np.ndarray
    v: float
    lam: np.ndarray
    src: str = "march"

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.t == other.t
            and self.v == other.v
            and self.src == other.src
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.lam, other.lam)
        )

    __hash__ = None


def _dot(lam, vec):
    """Sum over the component axis, for arrays or lists of Duals."""
    return sum(lam[i] * vec[i] for i in range(len(vec)))


class OcpDefinition:
    """Fixed-horizon optimal control problem with free terminal state.

    Subclasses supply ``dynamics``, ``running_cost`` and ``terminal_cost``.
    The terminal-cost gradient, the Hamiltonian-minimizing control and the
    costate right-hand side have generic implementations (forward-mode
    derivatives and a Newton solve in ``u``) that subclasses may override
    with closed forms.
    """

    name = "ocp"
    time_invariant = True

    def __init__(self, n, m, t0, tf, domain_lo, domain_hi):
        self.n = int(n)
        self.m = int(m)
        self.t0 = float(t0)
        self.tf = float(tf)
        self.domain_lo = np.asarray(domain_lo, dtype=float)
        self.domain_hi = np.asarray(domain_hi, dtype=float)
        if self.tf <= self.t0:
            raise ValueError("final_time must exceed initial_time")
        if self.domain_lo.shape != (self.n,) or self.domain_hi.shape != (self.n,):
            raise ValueError("sample domain bounds must be n-vectors")

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n}, m={self.m}, t0={self.t0}, tf={self.tf})"

    # -- model ---------------------------------------------------------------
    def dynamics(self, t, x, u):
        raise NotImplementedError

    def running_cost(self, t, x, u):
        raise NotImplementedError

    def terminal_cost(self, x):
        raise NotImplementedError

    def terminal_cost_gradient(self, x):
        return dual_diff(self.terminal_cost, x)[1]

    def hamiltonian(self, t, x, lam, u):
        return self.running_cost(t, x, u) + _dot(lam, self.dynamics(t, x, u))

    def optimal_control(self, t, x, lam, iterations=20):
        """Minimize ``H`` over ``u`` by Newton's method from ``u = 0``.

        The gradient is exact (forward mode); the Hessian is a central
        difference of that gradient.
        """
        x = np.asarray(x, dtype=float)
        lam = np.asarray(lam, dtype=float)
        u = np.zeros((self.m,) + x.shape[1:])
        h = 1e-5

        def grad(uu):
            return dual_diff(lambda v: self.hamiltonian(t, x, lam, v), uu)[1]

        for _ in range(iterations):
            g = grad(u)
            if np.max(np.abs(g)) < 1e-12:
                break
            hess = np.empty((self.m, self.m) + u.shape[1:])
            for j in range(self.m):
                du = np.zeros_like(u)
                du[j] = h
                hess[:, j] = (grad(u + du) - grad(u - du)) / (2 * h)
            if u.ndim == 1:
                step = np.linalg.solve(hess, g)
            else:
                hm = np.moveaxis(hess, (0, 1), (-2, -1))
                step = np.moveaxis(np.linalg.solve(hm, np.moveaxis(g, 0, -1)[..., None])[..., 0], -1, 0)
            u = u - step
        return u

    def costate_rhs(self, t, x, lam):
        """``-H_x`` at ``u = u*(t, x, lam)``, by forward-mode differentiation."""
        u = self.optimal_control(t, x, lam)
        _, hx = dual_diff(lambda xx: self.hamiltonian(t, xx, lam, u), x)
        return -hx

    # -- sampling --------------------------------------------------------------
    def sample_states(self, rng, count):
        """Uniform draws from the sample domain, shape ``(count, n)``."""
        return rng.uniform(self.domain_lo, self.domain_hi, size=(count, self.n))


# ---------------------------------------------------------------------------
# rigid body with momentum wheels


@dataclass(frozen=True)
class RigidBodyParams:
    J: np.ndarray = field(default_factory=lambda: np.diag([2.0, 3.0, 4.0]))
    B: np.ndarray = field(
        default_factory=lambda: np.array(
            [[1.0, 1 / 20, 1 / 10], [1 / 15, 1.0, 1 / 10], [1 / 10, 1 / 15, 1.0]]
        )
    )
    h: np.ndarray = field(default_factory=lambda: np.ones(3))
    W1: float = 1.0
    W2: float = 10.0
    W3: float = 0.5
    W4: float = 1.0
    W5: float = 1.0
    tf: float = 20.0

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "B", np.asarray(self.B, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))
        if J.shape != (3, 3) or self.B.shape != (3, 3) or self.h.shape != (3,):
            raise ConfigError("rigid body needs 3x3 J and B and a 3-vector h")
        if not np.allclose(J, J.T) or np.any(np.linalg.eigvalsh(J) <= 0):
            raise ConfigError("inertia J must be symmetric positive definite")
        # plain-float copies keep Dual arithmetic on its fast path
        object.__setattr__(self, "_Jinv_rows", np.linalg.inv(J).tolist())
        object.__setattr__(self, "_B_rows", self.B.tolist())
        object.__setattr__(self, "_h_list", self.h.tolist())
        object.__setattr__(self, "_gain", -(self.B.T @ np.linalg.inv(J)) / self.W3)

    @classmethod
    def from_overrides(cls, **overrides):
        known = {f.name for f in fields(cls)}
        for key in overrides:
            if key not in known:
                raise ConfigError(f"unknown rigid body parameter: {key}")
        return cls(**overrides)


def _check_gimbal(v):
    theta = value_of(v[1])
    if np.any(np.abs(theta) >= np.pi / 2 - GIMBAL_GUARD):
        raise GimbalSingularity("pitch angle too close to +-pi/2")


def _euler_rows(v):
    phi, theta = v[0], v[1]
    sp, cp = np.sin(phi), np.cos(phi)
    tt, ct = np.tan(theta), np.cos(theta)
    zero = 0.0 * phi
    return [
        [1.0 + zero, sp * tt, cp * tt],
        [zero, cp, -sp],
        [zero, sp / ct, cp / ct],
    ]


def _skew_rows(w):
    zero = 0.0 * w[0]
    return [
        [zero, w[2], -w[1]],
        [-w[2], zero, w[0]],
        [w[1], -w[0], zero],
    ]


def _rotation_rows(v):
    phi, theta, psi = v[0], v[1], v[2]
    sf, cf = np.sin(phi), np.cos(phi)
    st, ct = np.sin(theta), np.cos(theta)
    ss, cs = np.sin(psi), np.cos(psi)
    return [
        [ct * cs, ct * ss, -st],
        [sf * st * cs - cf * ss, sf * st * ss + cf * cs, ct * sf],
        [cf * st * cs + sf * ss, cf * st * ss - sf * cs, ct * cf],
    ]


def _rows_to_array(rows):
    return np.array([[np.broadcast_to(value_of(e), np.shape(value_of(rows[0][0]))) for e in r] for r in rows])


def _matvec(rows, vec):
    return [vec[0] * row[0] + vec[1] * row[1] + vec[2] * row[2] for row in rows]


def euler_kinematics(v):
    """Map from body rates to Euler-angle rates, ``vdot = E(v) @ omega``."""
    v = np.asarray(v, dtype=float)
    _check_gimbal(v)
    return _rows_to_array(_euler_rows(v))


def skew(w):
    return _rows_to_array(_skew_rows(np.asarray(w, dtype=float)))


def rotation(v):
    return _rows_to_array(_rotation_rows(np.asarray(v, dtype=float)))


def rigid_body_rhs(t, x, u, params=None):
    """State derivative ``(E(v) w, J^-1 (S(w) R(v) h + B u))``."""
    p = params or RigidBodyParams()
    v, w = x[0:3], x[3:6]
    _check_gimbal(v)
    vdot = _matvec(_euler_rows(v), w)
    h = p._h_list
    Rh = [row[0] * h[0] + row[1] * h[1] + row[2] * h[2] for row in _rotation_rows(v)]
    torque = _matvec(_skew_rows(w), Rh)
    Bu = _matvec(p._B_rows, u)
    rhs = [torque[i] + Bu[i] for i in range(3)]
    wdot = _matvec(p._Jinv_rows, rhs)
    return stack(vdot + wdot)


def rigid_body_optimal_control(lam, params=None):
    """Closed-form minimizer of the rigid-body Hamiltonian in ``u``."""
    p = params or RigidBodyParams()
    lam = np.asarray(lam, dtype=float)
    return np.tensordot(p._gain, lam[3:6], axes=(1, 0))


def rigid_body_costate_rhs(x, lam, params=None):
    """Closed-form ``-H_x`` for the rigid body (the control enters ``H``
    only through ``lam``, so no envelope term appears)."""
    p = params or RigidBodyParams()
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    _check_gimbal(x[0:3])
    phi, theta, psi = x[0], x[1], x[2]
    w = x[3:6]
    lv = lam[0:3]
    mu = np.tensordot(np.asarray(p._Jinv_rows), lam[3:6], axes=(1, 0))
    sf, cf = np.sin(phi), np.cos(phi)
    st, ct = np.sin(theta), np.cos(theta)
    ss, cs = np.sin(psi), np.cos(psi)
    tt = st / ct
    h0, h1, h2 = p._h_list

    # kinematic term lam_v . E(v) w
    a = sf * w[1] + cf * w[2]
    b = cf * w[1] - sf * w[2]
    dq_phi = lv[0] * tt * b - lv[1] * a + lv[2] * b / ct
    dq_theta = (lv[0] + lv[2] * st) * a / (ct * ct)
    Et_lam = [lv[0] + 0.0 * phi, lv[0] * sf * tt + lv[1] * cf + lv[2] * sf / ct, lv[0] * cf * tt - lv[1] * sf + lv[2] * cf / ct]

    # gyroscopic term mu . ((R h) x w) = (w x mu) . R h
    c_h = cs * h0 + ss * h1  # Rz(psi) h, first two entries
    d_h = -ss * h0 + cs * h1
    r0 = ct * c_h - st * h2
    r1 = sf * st * c_h + cf * d_h + ct * sf * h2
    r2 = cf * st * c_h - sf * d_h + ct * cf * h2
    g = [w[1] * mu[2] - w[2] * mu[1], w[2] * mu[0] - w[0] * mu[2], w[0] * mu[1] - w[1] * mu[0]]
    # derivatives of R h in each angle
    dr_phi = [0.0 * phi, r2, -r1]
    s_row = -st * c_h - ct * h2
    dr_theta = [s_row, sf * (ct * c_h - st * h2), cf * (ct * c_h - st * h2)]
    dc, dd = d_h, -c_h  # d/dpsi of (c_h, d_h)
    dr_psi = [ct * dc, sf * st * dc + cf * dd, cf * st * dc - sf * dd]
    dot = lambda u, v: u[0] * v[0] + u[1] * v[1] + u[2] * v[2]
    mu_x_r = [mu[1] * r2 - mu[2] * r1, mu[2] * r0 - mu[0] * r2, mu[0] * r1 - mu[1] * r0]

    hv = [
        p.W1 * phi + dq_phi + dot(g, dr_phi),
        p.W1 * theta + dq_theta + dot(g, dr_theta),
        p.W1 * psi + dot(g, dr_psi),
    ]
    hw = [p.W2 * w[i] + Et_lam[i] + mu_x_r[i] for i in range(3)]
    return -np.array(hv + hw)


class RigidBodyProblem(OcpDefinition):
    """Attitude control with three momentum wheels (n = 6, m = 3)."""

    name = "rigid_body"

    def __init__(self, params=None):
        self.params = params or RigidBodyParams()
        lo = np.array([-np.pi / 3] * 3 + [-np.pi / 4] * 3)
        super().__init__(6, 3, 0.0, self.params.tf, lo, -lo)

    def dynamics(self, t, x, u):
        return rigid_body_rhs(t, x, u, self.params)

    def running_cost(self, t, x, u):
        p = self.params
        v2 = sum(x[i] * x[i] for i in range(3))
        w2 = sum(x[i] * x[i] for i in range(3, 6))
        u2 = sum(u[i] * u[i] for i in range(3))
        return 0.5 * (p.W1 * v2 + p.W2 * w2 + p.W3 * u2)

    def terminal_cost(self, x):
        p = self.params
        v2 = sum(x[i] * x[i] for i in range(3))
        w2 = sum(x[i] * x[i] for i in range(3, 6))
        return 0.5 * (p.W4 * v2 + p.W5 * w2)

    def terminal_cost_gradient(self, x):
        p = self.params
        x = np.asarray(x, dtype=float)
        scale = np.array([p.W4] * 3 + [p.W5] * 3).reshape((6,) + (1,) * (x.ndim - 1))
        return scale * x

    def optimal_control(self, t, x, lam, iterations=None):
        return rigid_body_optimal_control(lam, self.params)

    def costate_rhs(self, t, x, lam):
        return rigid_body_costate_rhs(x, lam, self.params)


# ---------------------------------------------------------------------------
# scalar LQR with a known value function


class LqrProblem(OcpDefinition):
    """``xdot = u``, ``L = (x^2 + u^2)/2``, ``psi = x^2/2``.

    The Riccati equation has the fixed point ``p = 1`` so ``V(t, x) = x^2/2``
    for every horizon, the costate is ``x`` and the optimal state decays as
    ``exp(-(t - t0))``.
    """

    name = "lqr"

    def __init__(self, tf=1.0, bound=1.0):
        super().__init__(1, 1, 0.0, tf, [-bound], [bound])

    def dynamics(self, t, x, u):
        return u + 0.0 * x

    def running_cost(self, t, x, u):
        return 0.5 * (x[0] * x[0] + u[0] * u[0])

    def terminal_cost(self, x):
        return 0.5 * x[0] * x[0]

    def terminal_cost_gradient(self, x):
        return np.array(x, dtype=float)

    def optimal_control(self, t, x, lam, iterations=None):
        return -np.asarray(lam, dtype=float)

    def costate_rhs(self, t, x, lam):
        return -np.asarray(x, dtype=float)

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1) if x.ndim > 1 else 0.5 * float(x @ x)

    def costate(self, t, x):
        return np.asarray(x, dtype=float)


def lqr_test_problem(tf=1.0):
    return LqrProblem(tf=tf)


PROBLEMS = {
    "rigid_body": lambda **kw: RigidBodyProblem(RigidBodyParams.from_overrides(**kw)),
    "lqr": lambda **kw: LqrProblem(**kw),
}


def get_problem(name, **overrides):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ConfigError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    try:
        return factory(**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from None
