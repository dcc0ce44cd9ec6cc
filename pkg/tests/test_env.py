import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dockrl.config import load_scenario
from dockrl.dynamics import ControlInput, Disturbance, StateVector, integrate_step, quat_from_axis_angle
from dockrl.env import (
    KEEPOUT, OK, SUCCESS, TIME_LIMIT, ZONE_EXIT, DockingEnv, RewardWeights, StabilizationCriteria,
    reward_mpc, reward_standalone, stabilization_check, zone_and_keepout_check,
)
from dockrl.errors import ConfigError, DynamicsInputError, EpisodeError, ParameterError

PLANAR, _ = load_scenario("planar_lab")
DOCKING, _ = load_scenario("leo_docking")
W3 = PLANAR.reward_weights
W6 = DOCKING.reward_weights
GOAL = StateVector.at_rest()


def slosh(f=(0, 0, 0), tau=(0, 0, 0)):
    return Disturbance(np.array(f, dtype=float), np.array(tau, dtype=float))


def at(pos=(0, 0, 0), angle_deg=0.0, axis=(0, 0, 1)):
    return StateVector.at_rest(pos, quat_from_axis_angle(axis, math.radians(angle_deg)))


class TestStandaloneReward:
    def test_perfect_state(self):
        assert reward_standalone(GOAL, np.zeros(6), slosh(), 0.0, W6) == pytest.approx(55.0, abs=1e-12)

    def test_large_errors_vanish(self):
        r = reward_standalone(at((1e4, 0, 0), 170.0), np.zeros(6), slosh(), DOCKING.episode_limit, W6)
        assert 0.0 < r < 1e-10

    def test_unit_control(self):
        r = reward_standalone(GOAL, np.array([1.0, 0, 0, 0, 0, 0]), slosh(), 0.0, W6)
        assert r == pytest.approx(45.0, abs=1e-12)

    def test_slosh_penalties(self):
        r = reward_standalone(GOAL, np.zeros(6), slosh((1, 0, 0), (0, 0, 0.5)), 0.0, W6)
        assert r == pytest.approx(55.0 - 5.0 - 10.0 * 0.25, abs=1e-12)

    @given(st.floats(0, 100), st.floats(0, math.pi), st.floats(0, 5000))
    def test_bounds(self, dist, angle, t):
        s = StateVector.at_rest([dist, 0, 0], quat_from_axis_angle([1, 0, 0], angle))
        r = reward_standalone(s, np.zeros(6), None, t, W6)
        assert 0.0 <= r <= 55.0
        if dist > 1e-9 or angle > 1e-6:
            assert r < 55.0

    @settings(max_examples=50)
    @given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 3), st.floats(0, 3), st.floats(0, 1000))
    def test_monotone_in_errors(self, d1, d2, a1, a2, t):
        lo_d, hi_d = sorted((d1, d2))
        lo_a, hi_a = sorted((a1, a2))
        r = lambda d, a: reward_standalone(StateVector.at_rest([0, d, 0], quat_from_axis_angle([0, 1, 0], a)),
                                           np.zeros(6), None, t, W6)
        assert r(hi_d, lo_a) <= r(lo_d, lo_a)
        assert r(lo_d, hi_a) <= r(lo_d, lo_a)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 5), st.floats(0, 5))
    def test_monotone_in_control_and_slosh(self, u1, u2, f1, f2):
        lo_u, hi_u = sorted((u1, u2))
        lo_f, hi_f = sorted((f1, f2))
        r = lambda u, f: reward_standalone(GOAL, np.full(6, u), slosh((f, 0, 0), (0, f, 0)), 0.0, W6)
        assert r(hi_u, lo_f) <= r(lo_u, lo_f)
        assert r(lo_u, hi_f) <= r(lo_u, lo_f)

    @given(st.floats(0.01, 3.0), st.floats(0, 500), st.floats(1, 500))
    def test_sharpens_over_time(self, angle, t, dt):
        w = RewardWeights(np.eye(6) * 10, np.eye(12), k1=0.01)
        s = StateVector.at_rest([0, 0, 0], quat_from_axis_angle([0, 0, 1], angle))
        assert reward_standalone(s, np.zeros(6), None, t + dt, w) < reward_standalone(s, np.zeros(6), None, t, w)

    def test_action_clamped(self):
        a = reward_standalone(GOAL, np.full(6, 3.0), None, 0.0, W6)
        b = reward_standalone(GOAL, np.ones(6), None, 0.0, W6)
        assert a == b


class TestMpcReward:
    def test_on_reference(self):
        s = at((3, 2, 1), 20.0)
        assert reward_mpc(s, s, np.zeros(6), slosh(), 5.0, W6) == reward_standalone(s, np.zeros(6), slosh(), 5.0, W6)

    def test_unit_offset(self):
        s = at((3, 2, 1))
        ref = at((2, 2, 1))
        diff = reward_standalone(s, np.zeros(6), None, 0.0, W6) - reward_mpc(s, ref, np.zeros(6), None, 0.0, W6)
        assert diff == pytest.approx(1.0, abs=1e-12)

    @given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(-1, 1))
    def test_never_above_standalone(self, offset, yaw):
        s = StateVector.at_rest([1, 2, 0], quat_from_axis_angle([0, 0, 1], 0.3))
        ref = StateVector(np.array([1, 2, 0]) + offset[:3], offset[3:], quat_from_axis_angle([0, 0, 1], yaw), np.zeros(3))
        for w, planar in ((W6, False), (W3, True)):
            a = np.zeros(w.control_weight.shape[0])
            assert reward_mpc(s, ref, a, None, 0.0, w, planar=planar) <= reward_standalone(s, a, None, 0.0, w)

    def test_missing_reference(self):
        with pytest.raises(ParameterError):
            reward_mpc(GOAL, None, np.zeros(6), None, 0.0, W6)


class TestStabilization:
    crit = StabilizationCriteria()

    def test_goal(self):
        assert stabilization_check(GOAL, GOAL, self.crit)

    def test_position_just_outside(self):
        assert not stabilization_check(at((0.06, 0, 0)), GOAL, self.crit)

    def test_attitude_inside(self):
        assert stabilization_check(at(angle_deg=4.0), GOAL, self.crit)
        assert not stabilization_check(at(angle_deg=6.0), GOAL, self.crit)

    def test_velocity_and_rate(self):
        assert not stabilization_check(StateVector([0, 0, 0], [0.11, 0, 0], [0, 0, 0, 1], [0, 0, 0]), GOAL, self.crit)
        assert not stabilization_check(StateVector([0, 0, 0], [0, 0, 0], [0, 0, 0, 1], [0, 0, math.radians(1.1)]),
                                       GOAL, self.crit)


class TestZoneAndKeepOut:
    def test_keep_out_misaligned(self):
        assert zone_and_keepout_check(at((5, 0, 0), 30.0), DOCKING) == KEEPOUT

    def test_keep_out_aligned(self):
        assert zone_and_keepout_check(at((5, 0, 0), 2.0), DOCKING) == OK

    def test_outside_zone(self):
        assert zone_and_keepout_check(at((0, 101, 0)), DOCKING) == ZONE_EXIT
        assert zone_and_keepout_check(at((61, 0, 0)), DOCKING) == ZONE_EXIT

    def test_zone_extent(self):
        span = DOCKING.zone_upper - DOCKING.zone_lower
        assert sorted(span[:2]) == [120.0, 200.0]

    def test_inside(self):
        assert zone_and_keepout_check(at((30, -80, 5), 90.0), DOCKING) == OK


class TestReset:
    def test_containment(self):
        env = DockingEnv(DOCKING)
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            env.reset(rng)
            p = env.x[:3]
            assert np.all(p >= DOCKING.zone_lower) and np.all(p <= DOCKING.zone_upper)
            assert np.linalg.norm(p) >= DOCKING.keep_out_radius
            assert np.all(env.x[3:6] == 0) and np.all(env.x[10:] == 0)

    def test_seeded(self):
        a, b = DockingEnv(DOCKING), DockingEnv(DOCKING)
        np.testing.assert_array_equal(a.reset(np.random.default_rng(4)), b.reset(np.random.default_rng(4)))
        np.testing.assert_array_equal(a.x, b.x)

    def test_planar_embedding(self):
        env = DockingEnv(PLANAR)
        rng = np.random.default_rng(1)
        for _ in range(200):
            env.reset(rng)
            x = env.x
            assert x[2] == 0 and x[5] == 0 and x[6] == 0 and x[7] == 0 and x[10] == 0 and x[11] == 0

    def test_observation_layout(self):
        assert DockingEnv(PLANAR).reset(np.random.default_rng(0)).shape == (7,)
        assert DockingEnv(DOCKING).reset(np.random.default_rng(0)).shape == (13,)

    def test_start_inside_keep_out_rejected(self):
        bad = DOCKING.replace(start_lower=np.array([-1.0, -1, -1]), start_upper=np.array([1.0, 1, 1]))
        with pytest.raises(ConfigError):
            DockingEnv(bad).reset(np.random.default_rng(0))

    def test_goal_outside_zone_rejected(self):
        with pytest.raises(ConfigError):
            DOCKING.replace(goal_state=StateVector.at_rest([500.0, 0, 0]))


class TestStep:
    def test_goal_is_success_after_dwell(self):
        env = DockingEnv(DOCKING.replace(slosh=None, fuel_mass_range=None))
        env.reset(np.random.default_rng(0), initial=GOAL)
        for i in range(DOCKING.stabilization.dwell_steps):
            tr = env.step(np.zeros(6))
            assert tr.done == (i == DOCKING.stabilization.dwell_steps - 1)
        assert tr.cause == SUCCESS and tr.terminal

    def test_zone_exit(self):
        sc = PLANAR.replace(randomize_attitude=False)
        env = DockingEnv(sc)
        env.reset(np.random.default_rng(0), initial=at((1.2, 0, 0)))
        for _ in range(sc.max_steps):
            tr = env.step(np.array([1.0, 0.0, 0.0]))
            if tr.done:
                break
        assert tr.cause == ZONE_EXIT

    def test_time_limit_and_length_bound(self):
        sc = PLANAR.replace(episode_limit=2.0)
        env = DockingEnv(sc)
        env.reset(np.random.default_rng(0), initial=at((1.0, 1.0, 0)))
        n = 0
        while not env.done:
            tr = env.step(np.zeros(3))
            n += 1
        assert tr.cause == TIME_LIMIT and not tr.terminal
        assert n == 20 <= sc.episode_limit / sc.control_period + 1

    def test_planar_control_period(self):
        assert PLANAR.control_period == 0.1

    def test_zero_action_matches_free_drift(self):
        sc = DOCKING.replace(slosh=None, fuel_mass_range=None)
        env = DockingEnv(sc)
        start = StateVector([20.0, 30.0, 1.0], [0.01, -0.02, 0.0], quat_from_axis_angle([1, 1, 0], 0.4), [0.0, 0.001, 0.002])
        env.reset(np.random.default_rng(0), initial=start)
        tr = env.step(np.zeros(6))
        ref = start
        for _ in range(sc.substeps):
            ref = integrate_step(ref, ControlInput(np.zeros(3), np.zeros(3)), slosh(), sc.spacecraft, sc.control_period / sc.substeps)
        np.testing.assert_allclose(tr.next_state, ref.as_array(), rtol=0, atol=1e-12)

    def test_action_scaling(self):
        env = DockingEnv(DOCKING)
        env.reset(np.random.default_rng(0))
        tr = env.step(np.array([1.0, -0.5, 0, 0, 0, 2.0]))
        np.testing.assert_array_equal(tr.control, [10.0, -5.0, 0, 0, 0, 2.0])

    def test_shaped_reward_not_above_task_reward(self):
        env = DockingEnv(PLANAR.replace(episode_limit=1.0), mpc_shaping=True)
        env.reset(np.random.default_rng(2))
        rng = np.random.default_rng(3)
        while not env.done:
            tr = env.step(rng.uniform(-1, 1, 3))
            assert tr.reward <= tr.task_reward
            assert tr.info["reference"] is not None

    def test_step_after_done(self):
        env = DockingEnv(PLANAR.replace(episode_limit=0.1))
        env.reset(np.random.default_rng(0))
        env.step(np.zeros(3))
        with pytest.raises(EpisodeError):
            env.step(np.zeros(3))

    def test_step_before_reset(self):
        with pytest.raises(EpisodeError):
            DockingEnv(PLANAR).step(np.zeros(3))

    def test_bad_action(self):
        env = DockingEnv(PLANAR)
        env.reset(np.random.default_rng(0))
        with pytest.raises(DynamicsInputError):
            env.step(np.zeros(6))
        with pytest.raises(DynamicsInputError):
            env.step(np.array([np.nan, 0, 0]))

    def test_deterministic(self):
        def rollout():
            env = DockingEnv(DOCKING.replace(episode_limit=20.0))
            env.reset(np.random.default_rng(9))
            rng = np.random.default_rng(10)
            out = []
            while not env.done:
                tr = env.step(rng.uniform(-1, 1, 6))
                out.append((tr.reward, *tr.next_state))
            return np.array(out)
        np.testing.assert_array_equal(rollout(), rollout())

    def test_slosh_reported(self):
        env = DockingEnv(DOCKING.replace(episode_limit=5.0))
        env.reset(np.random.default_rng(0))
        tr = env.step(np.ones(6))
        assert tr.info["slosh_force"] > 0
        assert tr.info["slosh_force"] == pytest.approx(np.linalg.norm(tr.info["slosh_force_vec"]))
