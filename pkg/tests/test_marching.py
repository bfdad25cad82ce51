import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjbkit.bvp import Trajectory, solve_tpbvp
from hjbkit.errors import ContinuationFailed
from hjbkit.marching import MarchSchedule, extend_linear, extend_piecewise, march


def ramp(slope=1.0, span=1.0, rows=3):
    mesh = np.linspace(0.0, span, 11)
    Y = np.vstack([slope * mesh + k for k in range(rows)])
    return Trajectory(mesh, Y, np.full_like(Y, slope))


class TestExtendPiecewise:
    def test_frozen_tail(self):
        sol = ramp(2.0)
        guess = extend_piecewise(sol, 1.5)
        np.testing.assert_array_equal(guess(1.5), [2.0, 3.0, 4.0])

    def test_identity_on_old_interval(self):
        sol = ramp(1.0)
        t = np.linspace(0, 1, 17)
        np.testing.assert_array_equal(extend_piecewise(sol, 2.0)(t), sol(t))

    def test_all_components(self):
        guess = extend_piecewise(ramp(1.0), 3.0)
        out = guess(np.array([1.2, 2.5, 3.0]))
        for row, k in zip(out, range(3)):
            np.testing.assert_array_equal(row, 1.0 + k)

    def test_rejects_shorter(self):
        with pytest.raises(ValueError):
            extend_piecewise(ramp(), 0.5)


class TestExtendLinear:
    def test_rescaled_ramp(self):
        guess = extend_linear(ramp(1.0, rows=1), 2.0)
        t = np.linspace(0, 2, 9)
        np.testing.assert_allclose(guess(t)[0], t / 2, atol=1e-15)

    def test_endpoints(self):
        sol = ramp(3.0)
        guess = extend_linear(sol, 4.0)
        np.testing.assert_allclose(guess(0.0), sol(0.0), atol=1e-15)
        np.testing.assert_allclose(guess(4.0), sol(1.0), atol=1e-15)

    def test_constant(self):
        guess = extend_linear(ramp(0.0), 5.0)
        np.testing.assert_array_equal(guess(np.linspace(0, 5, 7))[1], np.ones(7))


class TestSchedule:
    def test_geometric(self):
        s = MarchSchedule()
        assert s.first(0.0, 20.0) == 1.0
        assert s.next(0.0, 20.0, 1.0, 1.0) == 3.0
        assert s.next(0.0, 20.0, 15.0, 8.0) == 20.0

    def test_explicit(self):
        s = MarchSchedule(times=(1.0, 2.0, 4.0))
        assert s.first(0.0, 4.0) == 1.0
        assert s.next(0.0, 4.0, 2.0, 1.0) == 4.0

    @pytest.mark.parametrize("kw", [{"times": (1.0, 1.0)}, {"initial_frac": 0.0}, {"factor": 0.5}, {"max_retries": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MarchSchedule(**kw)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.001, 1.0), st.floats(1.0, 4.0), st.floats(0.5, 50.0))
def test_schedule_monotone(frac, factor, tf):
    s = MarchSchedule(initial_frac=frac, factor=factor)
    horizons = [s.first(0.0, tf)]
    inc = horizons[0]
    while horizons[-1] < tf and len(horizons) < 100_000:
        nxt = s.next(0.0, tf, horizons[-1], inc)
        inc = nxt - horizons[-1]
        horizons.append(nxt)
    assert all(b >= a for a, b in zip(horizons, horizons[1:]))
    assert horizons[-1] == tf


def test_single_step_schedule_matches_direct(lqr):
    x0 = np.array([0.7])
    direct = solve_tpbvp(lqr, 0.0, x0)
    marched = march(lqr, 0.0, x0, schedule=MarchSchedule(times=(lqr.tf,)))
    assert marched.value == direct.value
    np.testing.assert_array_equal(marched.Y, direct.Y)


def test_rigid_march_reaches_horizon(rigid):
    x0 = np.array([0.5, -0.3, 0.4, 0.1, -0.1, 0.05])
    sol = march(rigid, 0.0, x0)
    assert sol.tf == rigid.tf
    assert sol.value > 0
    again = march(rigid, 0.0, x0)
    np.testing.assert_array_equal(sol.Y, again.Y)


def test_rigid_named_point(rigid):
    from oracles import RIGID_VALUE, RIGID_X0

    sol = march(rigid, 0.0, np.array(RIGID_X0))
    assert abs(sol.value - RIGID_VALUE) <= 1e-6 * RIGID_VALUE


def test_linear_extension_marches(lqr):
    sol = march(lqr, 0.0, np.array([1.0]), extension="linear", schedule=MarchSchedule(times=(0.3, 0.6, 1.0)))
    assert abs(sol.value - 0.5) <= 1e-6


def test_failure_reports_horizon(rigid):
    x0 = np.array([0.5, -0.3, 0.4, 0.1, -0.1, 0.05])
    with pytest.raises(ContinuationFailed) as info:
        march(rigid, 0.0, x0, schedule=MarchSchedule(max_retries=0), max_newton=1)
    assert info.value.horizon_reached is not None
