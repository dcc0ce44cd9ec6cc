import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dockrl.errors import DivergenceError, ParameterError
from dockrl.nn import Mlp, MlpSpec, gaussian_log_prob
from dockrl.ppo import (
    PpoAgent, PpoConfig, RolloutBuffer, clipped_objective, compute_advantages, compute_returns,
    discounted_returns, kl_estimate, policy_ratio, ppo_update, surrogate_loss, value_loss,
)

from oracles import discounted_returns_loop, param_fd_grads, relative_error

SMALL = dict(actor_hidden=(8,), critic_hidden=(8, 4), batch_episodes=2, minibatch_size=16)


def random_buffer(rng, obs_dim=3, act_dim=2, episodes=3, length=12, agent=None):
    buf = RolloutBuffer()
    for _ in range(episodes):
        obs = rng.normal(size=(length, obs_dim))
        if agent is None:
            acts = rng.normal(size=(length, act_dim))
            logp = rng.normal(size=length) - 2
        else:
            acts, logp = [], []
            for o in obs:
                a, lp, _ = agent.act(o, rng)
                acts.append(a)
                logp.append(lp)
        buf.add_episode(obs, acts, logp, rng.normal(size=length))
    return buf


class TestReturns:
    def test_two_step(self):
        np.testing.assert_allclose(discounted_returns([1, 1], 0.5), [1.5, 1.0])

    def test_zero_rewards(self):
        assert np.array_equal(discounted_returns(np.zeros(5), 0.9), np.zeros(5))

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
    def test_matches_double_loop(self, seed, gamma):
        r = np.random.default_rng(seed).normal(size=20)
        np.testing.assert_allclose(discounted_returns(r, gamma), discounted_returns_loop(r, gamma), rtol=1e-12, atol=1e-12)

    def test_incomplete_episode_rejected(self):
        buf = RolloutBuffer()
        buf.start_episode()
        buf.add(np.zeros(2), np.zeros(2), np.zeros(1), -1.0, 1.0)
        with pytest.raises(ParameterError):
            compute_returns(buf, 0.9)

    def test_returns_respect_episode_boundaries(self):
        buf = RolloutBuffer()
        buf.add_episode(np.zeros((2, 1)), np.zeros((2, 1)), [0, 0], [1, 1])
        buf.add_episode(np.zeros((1, 1)), np.zeros((1, 1)), [0], [5])
        np.testing.assert_allclose(compute_returns(buf, 0.5), [1.5, 1.0, 5.0])


class TestAdvantages:
    def test_perfect_critic(self):
        g = np.array([1.0, 2.0, -3.0])
        assert np.array_equal(compute_advantages(g, g, standardize=False), np.zeros(3))

    def test_two_step_example(self):
        adv = compute_advantages(discounted_returns([1, 1], 0.5), [1.0, 0.0], standardize=False)
        assert adv[0] == 0.5

    @given(st.integers(0, 2**32 - 1), st.integers(2, 200))
    def test_standardized(self, seed, n):
        rng = np.random.default_rng(seed)
        a = compute_advantages(rng.normal(size=n) * 50, rng.normal(size=n))
        assert abs(a.mean()) < 1e-10 and abs(a.std() - 1.0) < 1e-6


class TestRatioAndClip:
    def test_unchanged_policy(self):
        assert policy_ratio(-1.3, -1.3) == 1.0

    def test_probability_ratio(self):
        assert policy_ratio(math.log(0.6), math.log(0.3)) == pytest.approx(2.0, rel=1e-15)

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
    def test_telescopes(self, a, b, c):
        assert policy_ratio(a, b) * policy_ratio(b, c) == pytest.approx(policy_ratio(a, c), rel=1e-12)

    def test_exponent_clamped(self):
        assert policy_ratio(1000.0, 0.0) == math.exp(20.0)

    def test_non_finite_rejected(self):
        with pytest.raises(DivergenceError):
            policy_ratio(np.nan, 0.0)

    @given(st.floats(-100, 100), st.floats(0.01, 1.0))
    def test_ratio_one(self, adv, clip):
        assert clipped_objective(1.0, adv, clip) == adv

    def test_clip_cases(self):
        assert clipped_objective(2.0, 1.0, 0.2) == 1.2
        assert clipped_objective(0.5, -1.0, 0.2) == -0.8

    @given(st.integers(0, 2**32 - 1))
    def test_kl_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        assert kl_estimate(rng.normal(size=50), rng.normal(size=50)) >= 0.0


class TestLosses:
    def test_value_loss_examples(self):
        critic = Mlp(MlpSpec((2, 1)))
        loss, grads = value_loss(critic, np.zeros((1, 2)), [2.0])
        assert loss == 2.0
        loss, grads = value_loss(critic, np.ones((3, 2)), np.zeros(3))
        assert loss == 0.0 and all(np.all(g == 0) for g in grads)

    def test_value_gradient_two_parameters(self):
        critic = Mlp(MlpSpec((1, 1)))
        critic.set_params([np.array([[0.7]]), np.array([-0.2])])
        obs, g = np.array([[1.0], [2.0], [-1.0]]), np.array([0.5, 1.0, 2.0])
        _, grads = value_loss(critic, obs, g)
        fd = param_fd_grads(critic.params, lambda: value_loss(critic, obs, g)[0])
        assert relative_error(grads, fd) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_surrogate_gradient(self, seed):
        rng = np.random.default_rng(seed)
        actor = Mlp(MlpSpec((3, 6, 2)), rng)
        log_std = rng.normal(size=2) * 0.3
        obs, acts = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
        old = gaussian_log_prob(acts, actor(obs), np.exp(log_std)) + rng.normal(size=10) * 0.3
        adv = rng.normal(size=10)
        res = surrogate_loss(actor, log_std, obs, acts, old, adv, 0.2)
        loss = lambda: surrogate_loss(actor, log_std, obs, acts, old, adv, 0.2).loss
        fd = param_fd_grads(actor.params + [log_std], loss)
        assert relative_error(res.grads, fd) < 1e-4

    def test_surrogate_at_ratio_one_is_policy_gradient(self):
        rng = np.random.default_rng(3)
        actor = Mlp(MlpSpec((3, 5, 2)), rng)
        log_std = np.zeros(2)
        obs, acts, adv = rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), rng.normal(size=6)
        old = gaussian_log_prob(acts, actor(obs), np.exp(log_std))
        res = surrogate_loss(actor, log_std, obs, acts, old, adv, 0.2)
        # unclipped objective -mean(exp(logp - old) * A) has the same gradient at ratio 1
        pg = lambda: -float(np.mean(np.exp(gaussian_log_prob(acts, actor(obs), np.exp(log_std)) - old) * adv))
        assert res.loss == pytest.approx(-adv.mean(), rel=1e-12)
        assert relative_error(res.grads, param_fd_grads(actor.params + [log_std], pg)) < 1e-6

    def test_zero_advantage_zero_gradient(self):
        rng = np.random.default_rng(0)
        actor = Mlp(MlpSpec((3, 5, 2)), rng)
        obs, acts = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        res = surrogate_loss(actor, np.zeros(2), obs, acts, rng.normal(size=6), np.zeros(6), 0.2)
        assert all(np.all(g == 0) for g in res.grads)


class TestUpdate:
    def test_zero_advantages_leave_actor_unchanged(self):
        rng = np.random.default_rng(0)
        cfg = PpoConfig(**SMALL)
        agent = PpoAgent(3, 2, cfg, rng)
        agent.critic.set_params([np.zeros_like(p) for p in agent.critic.params])
        buf = RolloutBuffer()
        for _ in range(2):
            buf.add_episode(rng.normal(size=(10, 3)), rng.normal(size=(10, 2)), rng.normal(size=10), np.zeros(10))
        before = [p.copy() for p in agent.actor.params] + [agent.log_std.copy()]
        ppo_update(agent, buf, cfg, rng)
        for a, b in zip(before, agent.actor.params + [agent.log_std]):
            np.testing.assert_array_equal(a, b)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_ratio_stays_near_one(self, seed):
        rng = np.random.default_rng(seed)
        cfg = PpoConfig(**SMALL, actor_lr=1e-3)
        agent = PpoAgent(3, 2, cfg, rng)
        buf = random_buffer(rng, agent=agent)
        diag = ppo_update(agent, buf, cfg, rng)
        assert 1 - 2 * cfg.clip <= diag.mean_ratio <= 1 + 2 * cfg.clip
        assert 0.0 <= diag.clip_fraction <= 1.0 and diag.mean_kl >= 0.0

    def test_kl_early_stop(self):
        rng = np.random.default_rng(1)
        cfg = PpoConfig(**SMALL, actor_lr=0.05, epochs_per_batch=10)
        agent = PpoAgent(3, 2, cfg, rng)
        buf = random_buffer(rng, agent=agent)
        first = ppo_update(agent, buf, cfg, rng)
        second = ppo_update(agent, buf, cfg, rng)
        assert first.kl_stop or second.kl_stop
        assert min(first.epochs_run, second.epochs_run) < cfg.epochs_per_batch

    def test_reproducible(self):
        def run():
            rng = np.random.default_rng(42)
            cfg = PpoConfig(**SMALL, actor_lr=1e-3)
            agent = PpoAgent(3, 2, cfg, rng)
            diags = [ppo_update(agent, random_buffer(rng, agent=agent), cfg, rng) for _ in range(3)]
            return diags, agent.state_dict()
        (d1, s1), (d2, s2) = run(), run()
        assert d1 == d2
        assert all(np.array_equal(s1[k], s2[k]) for k in s1)

    def test_state_dict_round_trip(self):
        rng = np.random.default_rng(0)
        cfg = PpoConfig(**SMALL)
        a = PpoAgent(3, 2, cfg, rng)
        ppo_update(a, random_buffer(rng, agent=a), cfg, rng)
        b = PpoAgent(3, 2, cfg, np.random.default_rng(99))
        b.load_state_dict(a.state_dict())
        obs = rng.normal(size=3)
        assert np.array_equal(a.act(obs, deterministic=True)[0], b.act(obs, deterministic=True)[0])

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            PpoConfig(discount=0.0)
        with pytest.raises(ParameterError):
            PpoConfig(kl_target=0.0)
