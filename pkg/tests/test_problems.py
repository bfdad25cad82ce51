import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjbkit.dual import dual_diff
from hjbkit.errors import ConfigError, GimbalSingularity
from hjbkit.problems import (
    RigidBodyParams,
    RigidBodyProblem,
    euler_kinematics,
    get_problem,
    lqr_test_problem,
    rigid_body_optimal_control,
    rigid_body_rhs,
    rotation,
    skew,
)

from oracles import RIGID_WDOT_E1


def _fd(fn, x, h=1e-6):
    return np.array([(fn(x + h * e) - fn(x - h * e)) / (2 * h) for e in np.eye(len(x))])


class TestRigidBodyParams:
    def test_defaults(self):
        p = RigidBodyParams()
        np.testing.assert_array_equal(p.J, np.diag([2.0, 3.0, 4.0]))
        np.testing.assert_array_equal(p.h, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(p.B, [[1, 1 / 20, 1 / 10], [1 / 15, 1, 1 / 10], [1 / 10, 1 / 15, 1]])
        assert (p.W1, p.W2, p.W3, p.W4, p.W5, p.tf) == (1.0, 10.0, 0.5, 1.0, 1.0, 20.0)

    def test_rejects_indefinite_inertia(self):
        with pytest.raises(ConfigError):
            RigidBodyParams(J=np.diag([1.0, -1.0, 1.0]))

    def test_overrides(self):
        p = RigidBodyParams.from_overrides(W1=2.0, tf=5.0)
        assert p.W1 == 2.0 and p.tf == 5.0
        with pytest.raises(ConfigError):
            RigidBodyParams.from_overrides(W9=1.0)


class TestKinematics:
    def test_euler_identity(self):
        np.testing.assert_array_equal(euler_kinematics([0, 0, 0]), np.eye(3))

    def test_euler_quarter_turn(self):
        np.testing.assert_allclose(euler_kinematics([np.pi / 2, 0, 0]), [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)

    def test_gimbal_guard(self):
        with pytest.raises(GimbalSingularity):
            euler_kinematics([0, np.pi / 2 - 1e-12, 0])

    def test_skew(self):
        np.testing.assert_array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
        np.testing.assert_array_equal(skew([1, 0, 0]), [[0, 0, 0], [0, 0, 1], [0, -1, 0]])

    def test_rotation_examples(self):
        np.testing.assert_array_equal(rotation([0, 0, 0]), np.eye(3))
        np.testing.assert_allclose(rotation([np.pi, 0, 0]), np.diag([1, -1, -1]), atol=1e-15)


def test_kinematics_invariants_over_domain(rigid):
    rng = np.random.default_rng(7)
    pts = rigid.sample_states(rng, 1000)
    for x in pts:
        R = rotation(x[:3])
        assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-12
        assert abs(np.linalg.det(R) - 1) <= 1e-12
        S = skew(x[3:])
        assert np.max(np.abs(S + S.T)) == 0.0


class TestRigidBodyDynamics:
    def test_equilibrium(self):
        np.testing.assert_array_equal(rigid_body_rhs(0, np.zeros(6), np.zeros(3)), np.zeros(6))

    def test_unit_control(self):
        xdot = rigid_body_rhs(0, np.zeros(6), np.array([1.0, 0, 0]))
        np.testing.assert_allclose(xdot[3:], RIGID_WDOT_E1, rtol=1e-15)

    def test_matches_matrix_formula(self, rng):
        p = RigidBodyParams()
        for _ in range(20):
            x = rng.uniform(-1, 1, 6)
            u = rng.normal(size=3)
            v, w = x[:3], x[3:]
            expect = np.concatenate(
                [euler_kinematics(v) @ w, np.linalg.solve(p.J, skew(w) @ rotation(v) @ p.h + p.B @ u)]
            )
            np.testing.assert_allclose(rigid_body_rhs(0, x, u), expect, rtol=1e-13, atol=1e-14)

    def test_optimal_control_examples(self):
        np.testing.assert_array_equal(rigid_body_optimal_control(np.zeros(6)), np.zeros(3))
        lam = np.concatenate([np.zeros(3), np.diag([2.0, 3.0, 4.0]) @ [1.0, 0, 0]])
        np.testing.assert_allclose(rigid_body_optimal_control(lam), -2 * np.array([1, 1 / 20, 1 / 10]), rtol=1e-15)


def _check_problem_invariants(ocp, pts, rng):
    for x in pts:
        lam = rng.normal(size=ocp.n)
        # terminal gradient vs central differences
        g = ocp.terminal_cost_gradient(x)
        fd = _fd(lambda y: float(ocp.terminal_cost(y)), x)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(g))
        # costate rhs vs forward-mode derivative of H
        u = ocp.optimal_control(0.0, x, lam)
        _, hx = dual_diff(lambda y: ocp.hamiltonian(0.0, y, lam, u), x)
        assert np.linalg.norm(ocp.costate_rhs(0.0, x, lam) + hx) <= 1e-8 * max(1.0, np.linalg.norm(hx))
        # u* is stationary for u -> H
        _, hu = dual_diff(lambda v: ocp.hamiltonian(0.0, x, lam, v), u)
        assert np.linalg.norm(hu) <= 1e-8


@pytest.mark.parametrize("name", ["rigid_body", "lqr"])
def test_problem_invariants(name):
    ocp = get_problem(name)
    rng = np.random.default_rng(3)
    _check_problem_invariants(ocp, ocp.sample_states(rng, 100), rng)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_control_stationarity_random_costate(lam):
    ocp = RigidBodyProblem()
    lam = np.array(lam)
    u = rigid_body_optimal_control(lam)
    _, hu = dual_diff(lambda v: ocp.hamiltonian(0.0, np.full(6, 0.1), lam, v), u)
    assert np.linalg.norm(hu) <= 1e-10 * max(1.0, np.linalg.norm(lam))


def test_closed_form_costate_matches_forward_mode(rigid, rng):
    from hjbkit.problems import OcpDefinition

    X = rigid.sample_states(rng, 50).T
    lam = rng.normal(size=(6, 50))
    np.testing.assert_allclose(
        rigid.costate_rhs(0.0, X, lam), OcpDefinition.costate_rhs(rigid, 0.0, X, lam), rtol=1e-12, atol=1e-12
    )


def test_generic_control_newton_matches_closed_form(rigid, rng):
    from hjbkit.problems import OcpDefinition

    x = rigid.sample_states(rng, 5).T
    lam = rng.normal(size=(6, 5))
    u_generic = OcpDefinition.optimal_control(rigid, 0.0, x, lam)
    np.testing.assert_allclose(u_generic, rigid.optimal_control(0.0, x, lam), rtol=1e-7, atol=1e-9)


class TestLqr:
    def test_value_and_costate(self):
        ocp = lqr_test_problem()
        assert ocp.value(0.0, np.array([1.0])) == 0.5
        np.testing.assert_array_equal(ocp.costate(0.0, np.array([1.0])), [1.0])

    def test_feedback(self):
        ocp = lqr_test_problem(tf=3.0)
        assert ocp.tf == 3.0
        np.testing.assert_array_equal(ocp.optimal_control(0, np.array([2.0]), np.array([2.0])), [-2.0])


def test_unknown_problem():
    with pytest.raises(ConfigError):
        get_problem("pendulum")
