import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dockrl.dynamics import LinearModel, SpacecraftParams, StateVector, mean_motion
from dockrl.errors import ParameterError, SolverError
from dockrl.mpc import (
    CONVERGED, ConstraintSet, HorizonConfig, QuadraticProgram, TrajectoryPlan, build_qp, control_lookup,
    default_input_weight, default_state_weight, kkt_residual, plan_trajectory, reference_lookup, solve_qp,
)

from oracles import box_qp_brute_force

PARAMS = SpacecraftParams()


def random_box_qp(rng, n, rank=None):
    m = rng.normal(size=(n, rank or n))
    h = m @ m.T
    g = rng.normal(size=n) * 3
    lo = -rng.uniform(0.1, 2.0, size=n)
    hi = rng.uniform(0.1, 2.0, size=n)
    return QuadraticProgram(h, g, lo, hi)


def scalar_qp(bound=None):
    model = LinearModel(np.array([[1.0]]), np.array([[1.0]]), np.zeros(1), step=1.0)
    horizon = HorizonConfig(1, 1.0, np.eye(1), np.eye(1))
    lim = 1e6 if bound is None else bound
    cons = ConstraintSet([-np.inf], [np.inf], [-lim], [lim])
    return build_qp(np.zeros(1), np.ones(1), model, horizon, cons)


def docking_horizon(steps=50, dt=1.0):
    w = default_state_weight()
    return HorizonConfig(steps, dt, w, default_input_weight(PARAMS), 10 * w)


class TestBuildQp:
    def test_at_goal_gives_zero_controls(self):
        model = LinearModel(np.eye(2), np.eye(2), np.zeros(2), step=0.5)
        horizon = HorizonConfig(4, 0.5, np.eye(2), np.eye(2))
        qp = build_qp(np.ones(2), np.ones(2), model, horizon, ConstraintSet([-9] * 2, [9] * 2, [-1] * 2, [1] * 2))
        res = solve_qp(qp)
        np.testing.assert_allclose(res.x, 0, atol=1e-12)

    def test_scalar_unconstrained(self):
        res = solve_qp(scalar_qp())
        assert res.converged and res.x[0] == pytest.approx(0.5, abs=1e-12)

    def test_scalar_clipped(self):
        res = solve_qp(scalar_qp(0.3))
        assert res.converged and res.x[0] == 0.3

    def test_condensed_objective_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        n, m, big_n = 3, 2, 5
        a, b, d = rng.normal(size=(n, n)) * 0.5, rng.normal(size=(n, m)), rng.normal(size=n) * 0.1
        model = LinearModel(a, b, d, step=0.1)
        om = np.diag(rng.uniform(0.5, 2, n))
        k = np.diag(rng.uniform(0.5, 2, m))
        horizon = HorizonConfig(big_n, 0.1, om, k, 3 * om)
        s0, sf = rng.normal(size=n), rng.normal(size=n)
        qp = build_qp(s0, sf, model, horizon, ConstraintSet([-np.inf] * n, [np.inf] * n, [-5] * m, [5] * m))
        u = rng.normal(size=(big_n, m))
        s, total = s0, (s0 - sf) @ om @ (s0 - sf)
        for j in range(big_n):
            s = a @ s + b @ u[j] + d
            w = om + (3 * om if j == big_n - 1 else 0)
            total += (s - sf) @ w @ (s - sf) + u[j] @ k @ u[j]
        assert qp.objective(u.reshape(-1)) == pytest.approx(total, rel=1e-12)

    def test_rejects_continuous_model_and_mismatched_dt(self):
        model = LinearModel(np.eye(1), np.eye(1), np.zeros(1))
        horizon = HorizonConfig(1, 1.0, np.eye(1), np.eye(1))
        cons = ConstraintSet([-1], [1], [-1], [1])
        with pytest.raises(ParameterError):
            build_qp(np.zeros(1), np.ones(1), model, horizon, cons)
        with pytest.raises(ParameterError):
            build_qp(np.zeros(1), np.ones(1), LinearModel(np.eye(1), np.eye(1), np.zeros(1), step=2.0), horizon, cons)

    def test_rejects_non_psd_weight(self):
        with pytest.raises(ParameterError):
            HorizonConfig(1, 1.0, -np.eye(2), np.eye(1))


class TestSolveQp:
    def test_unconstrained_identity(self):
        res = solve_qp(QuadraticProgram(np.eye(2), [-1.0, -2.0], -np.inf, np.inf))
        np.testing.assert_allclose(res.x, [1, 2], atol=1e-12)

    def test_diagonal_clamp(self):
        res = solve_qp(QuadraticProgram(np.eye(2), [-1.0, -2.0], 0.0, 0.5))
        np.testing.assert_allclose(res.x, [0.5, 0.5], atol=0)

    def test_ten_variable_brute_force(self):
        qp = random_box_qp(np.random.default_rng(10), 10)
        res = solve_qp(qp)
        _, f_star = box_qp_brute_force(qp.hessian, qp.gradient, qp.lower, qp.upper)
        assert res.converged
        assert abs(res.objective - f_star) <= 1e-8 * max(1.0, abs(f_star))
        assert res.kkt_residual <= 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.booleans())
    def test_matches_brute_force(self, seed, n, deficient):
        rng = np.random.default_rng(seed)
        qp = random_box_qp(rng, n, rank=max(1, n - 2) if deficient else None)
        res = solve_qp(qp)
        _, f_star = box_qp_brute_force(qp.hessian, qp.gradient, qp.lower, qp.upper)
        assert res.converged
        assert abs(res.objective - f_star) <= 1e-8 * max(1.0, abs(f_star))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_monotone_and_feasible(self, seed, n):
        qp = random_box_qp(np.random.default_rng(seed), n)
        res = solve_qp(qp)
        assert all(b <= a + 1e-12 * max(1.0, abs(a)) for a, b in zip(res.history, res.history[1:]))
        assert np.all(res.x >= qp.lower) and np.all(res.x <= qp.upper)

    def test_kkt_sign_conditions(self):
        qp = random_box_qp(np.random.default_rng(4), 8)
        res = solve_qp(qp)
        grad = qp.hessian @ res.x + qp.gradient
        at_lo, at_hi = res.x <= qp.lower, res.x >= qp.upper
        interior = ~(at_lo | at_hi)
        assert np.all(np.abs(grad[interior]) <= 1e-8)
        assert np.all(grad[at_lo] >= -1e-8) and np.all(grad[at_hi] <= 1e-8)
        assert kkt_residual(qp, res.x) <= 1e-8 * max(1.0, np.linalg.eigvalsh(qp.hessian).max())

    def test_rejects_indefinite(self):
        with pytest.raises(SolverError):
            solve_qp(QuadraticProgram(np.diag([1.0, -1.0]), [0.0, 0.0], -1, 1))

    def test_rejects_infeasible_box(self):
        with pytest.raises(SolverError):
            QuadraticProgram(np.eye(1), [0.0], 1.0, 0.0)

    def test_max_iterations_flagged(self):
        qp = random_box_qp(np.random.default_rng(1), 6)
        res = solve_qp(qp, max_iter=1, polish_every=0, refine_every=0)
        assert res.status != CONVERGED


class TestPlanTrajectory:
    def constraints(self, **kw):
        return ConstraintSet.for_spacecraft(PARAMS, **kw)

    def test_at_goal(self):
        g = StateVector.at_rest()
        plan = plan_trajectory(g, g, PARAMS, docking_horizon(10), self.constraints())
        np.testing.assert_allclose(plan.controls, 0, atol=1e-12)
        np.testing.assert_allclose(plan.states, np.tile(g.as_array(), (11, 1)), atol=1e-12)

    def test_radial_offset_converges_toward_goal(self):
        start = StateVector.at_rest([10.0, 0, 0])
        goal = StateVector.at_rest()
        plan = plan_trajectory(start, goal, PARAMS, docking_horizon(50, 1.0), self.constraints())
        assert plan.status == CONVERGED
        assert np.linalg.norm(plan.states[-1] - goal.as_array()) < np.linalg.norm(start.as_array() - goal.as_array())
        h = plan.solver_history
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(h, h[1:]))
        np.testing.assert_array_equal(plan.states[0], start.as_array())

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-50, 50), st.floats(-90, 90), st.floats(-8, 8))
    def test_force_bounds_hold(self, x, y, z):
        start = StateVector.at_rest([x, y, z])
        plan = plan_trajectory(start, StateVector.at_rest(), PARAMS, docking_horizon(30, 5.0), self.constraints())
        assert np.abs(plan.controls[:, :3]).max() <= PARAMS.force_limit
        assert np.abs(plan.controls[:, 3:]).max() <= PARAMS.torque_limit

    def test_zero_state_weight_gives_zero_controls(self):
        horizon = HorizonConfig(10, 1.0, np.zeros((13, 13)), default_input_weight(PARAMS))
        plan = plan_trajectory(StateVector.at_rest([5.0, 1, 0]), StateVector.at_rest(), PARAMS, horizon, self.constraints())
        np.testing.assert_allclose(plan.controls, 0, atol=1e-12)

    def test_zero_input_weight_tracks_state(self):
        w = default_state_weight()
        free = HorizonConfig(10, 1.0, w, np.zeros((6, 6)))
        cheap = HorizonConfig(10, 1.0, w, default_input_weight(PARAMS))
        start = StateVector.at_rest([0.5, 0.2, 0])
        a = plan_trajectory(start, StateVector.at_rest(), PARAMS, free, self.constraints())
        b = plan_trajectory(start, StateVector.at_rest(), PARAMS, cheap, self.constraints())
        err = lambda p: sum(np.linalg.norm(s[:6]) ** 2 for s in p.states[1:])
        assert err(a) < err(b)

    def test_planar_mode_pins_out_of_plane_inputs(self):
        cons = self.constraints(planar=True)
        plan = plan_trajectory(StateVector.at_rest([1.0, -2.0, 0]), StateVector.at_rest(), PARAMS, docking_horizon(20), cons)
        assert np.all(plan.controls[:, [2, 3, 4]] == 0)

    def test_keep_out_half_space_is_respected(self):
        lo, hi = np.full(13, -np.inf), np.full(13, np.inf)
        lo[:3], hi[:3] = [-60, -100, -10], [60, 100, 10]
        cons = self.constraints(state_lower=lo, state_upper=hi, keep_out_radius=10.0)
        start = StateVector.at_rest([30.0, 40.0, 0.0])
        plan = plan_trajectory(start, StateVector.at_rest(), PARAMS, docking_horizon(40, 10.0), cons)
        e = start.rel_pos / np.linalg.norm(start.rel_pos)
        # soft penalty: slack stays a small fraction of the radius
        assert (plan.states[:, :3] @ e).min() >= 10.0 - 1.0
        assert plan.max_violation < 1.0


class TestLookup:
    def plan(self):
        states = np.tile(StateVector.at_rest().as_array(), (5, 1))
        states[:, 0] = np.arange(5)
        controls = np.arange(24.0).reshape(4, 6)
        return TrajectoryPlan(states, controls, start_time=3.0, dt=2.0)

    def test_reference_lookup(self):
        p = self.plan()
        assert reference_lookup(p, 3.0).rel_pos[0] == 0
        assert reference_lookup(p, 3.0 + 2.5 * 2.0).rel_pos[0] == 2
        assert reference_lookup(p, 1e6).rel_pos[0] == 4
        assert reference_lookup(p, -1e6).rel_pos[0] == 0

    def test_control_lookup(self):
        p = self.plan()
        np.testing.assert_array_equal(control_lookup(p, 3.0 + 2 * 1.5), p.controls[1])
        np.testing.assert_array_equal(control_lookup(p, 100.0), np.zeros(6))

    def test_plan_length_invariant(self):
        with pytest.raises(ParameterError):
            TrajectoryPlan(np.zeros((3, 13)), np.zeros((3, 6)), 0.0, 1.0)


def test_receding_horizon_tail():
    """Replanning from an on-plan state with the remaining horizon reproduces the tail."""
    n = mean_motion(600e3)
    big_n, dt, j = 30, 5.0, 7
    w = default_state_weight()
    full = HorizonConfig(big_n, dt, w, default_input_weight(PARAMS), 10 * w)
    cons = ConstraintSet.for_spacecraft(PARAMS)
    start = StateVector.at_rest([20.0, -30.0, 2.0])
    first = plan_trajectory(start, StateVector.at_rest(), PARAMS, full, cons, tol=1e-12)
    mid = first.state(j)
    tail = HorizonConfig(big_n - j, dt, w, default_input_weight(PARAMS), 10 * w)
    second = plan_trajectory(mid, StateVector.at_rest(), PARAMS, tail, cons, start_time=j * dt, tol=1e-12)
    assert n > 0
    assert np.abs(second.states - first.states[j:]).max() < 1e-6
    assert np.abs(second.controls - first.controls[j:]).max() < 1e-6
