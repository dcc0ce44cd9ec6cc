"""
Proximal policy optimization with Monte Carlo returns.

The actor is a tanh MLP producing the mean of a diagonal Gaussian whose
log standard deviation is a free parameter vector. Sampled actions are
stored before clipping; the environment clamps them to [-1, 1].
The critic predicts standardized returns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParameterError
from .nn import Adam, Mlp, MlpSpec, RunningNormalizer, gaussian_head, gaussian_log_prob

RATIO_EXP_CLAMP = 20.0


@dataclass
class PpoConfig:
    discount: float = 0.98
    clip: float = 0.2
    kl_target: float = 1e-3
    kl_stop_factor: float = 1.5
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    batch_episodes: int = 200
    epochs_per_batch: int = 10
    minibatch_size: int = 64
    actor_hidden: tuple[int, ...] = (128, 64)
    critic_hidden: tuple[int, ...] = (128, 64, 8)
    init_log_std: float = -0.5
    obs_clip: float = 10.0

    def __post_init__(self):
        if not 0 < self.discount <= 1:
            raise ParameterError("discount must lie in (0, 1]")
        if not self.clip > 0:
            raise ParameterError("clip must be positive")
        if not self.kl_target > 0:
            raise ParameterError("kl_target must be positive")
        if self.batch_episodes < 1 or self.epochs_per_batch < 1 or self.minibatch_size < 1:
            raise ParameterError("batch sizes and epoch counts must be positive")
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)


# ---------------------------------------------------------------------------
# rollout storage
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    raw_obs: list = field(default_factory=list)
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    complete: bool = False

    def __len__(self) -> int:
        return len(self.rewards)


class RolloutBuffer:
    """Ordered episodes with behaviour-policy log-probabilities."""

    def __init__(self):
        self.episodes: list[Episode] = []

    def start_episode(self) -> None:
        if self.episodes and not self.episodes[-1].complete:
            raise ParameterError("previous episode was not finished")
        self.episodes.append(Episode())

    def add(self, raw_obs, obs, action, log_prob: float, reward: float) -> None:
        if not self.episodes or self.episodes[-1].complete:
            raise ParameterError("call start_episode first")
        if not (math.isfinite(log_prob) and math.isfinite(reward)):
            raise DivergenceError("non-finite log-probability or reward")
        ep = self.episodes[-1]
        ep.raw_obs.append(np.asarray(raw_obs, dtype=float))
        ep.obs.append(np.asarray(obs, dtype=float))
        ep.actions.append(np.asarray(action, dtype=float))
        ep.log_probs.append(float(log_prob))
        ep.rewards.append(float(reward))

    def end_episode(self) -> None:
        if not self.episodes or len(self.episodes[-1]) == 0:
            raise ParameterError("cannot close an empty episode")
        self.episodes[-1].complete = True

    def add_episode(self, obs, actions, log_probs, rewards, raw_obs=None) -> None:
        self.start_episode()
        raw = obs if raw_obs is None else raw_obs
        for r_o, o, a, lp, r in zip(raw, obs, actions, log_probs, rewards):
            self.add(r_o, o, a, lp, r)
        self.end_episode()

    @property
    def n_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def stacked(self, name: str) -> np.ndarray:
        return np.concatenate([np.asarray(getattr(ep, name)) for ep in self.episodes])

    def episode_returns(self) -> np.ndarray:
        """Undiscounted cumulative reward per episode."""
        return np.array([sum(ep.rewards) for ep in self.episodes])


def discounted_returns(rewards, discount: float) -> np.ndarray:
    """G_t = r_t + discount * G_{t+1}, G_T = r_T."""
    r = np.asarray(rewards, dtype=float)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + discount * acc
        out[t] = acc
    return out


def compute_returns(buffer: RolloutBuffer, discount: float) -> np.ndarray:
    """Per-step discounted returns, concatenated in buffer order."""
    if not buffer.episodes:
        raise ParameterError("empty rollout buffer")
    if any(not ep.complete for ep in buffer.episodes):
        raise ParameterError("returns need complete episodes")
    return np.concatenate([discounted_returns(ep.rewards, discount) for ep in buffer.episodes])


def compute_advantages(returns, values, standardize: bool = True) -> np.ndarray:
    """A = G - V, optionally standardized over the batch.

    A batch with no spread is left centred but unscaled.
    """
    adv = np.asarray(returns, dtype=float) - np.asarray(values, dtype=float)
    if not standardize:
        return adv
    centred = adv - adv.mean()
    std = centred.std()
    return centred / std if std > 1e-8 else centred


def policy_ratio(new_log_prob, old_log_prob) -> np.ndarray:
    """exp(new - old) with the exponent clamped to +-20."""
    diff = np.asarray(new_log_prob, dtype=float) - np.asarray(old_log_prob, dtype=float)
    if not np.all(np.isfinite(diff)):
        raise DivergenceError("non-finite log-probabilities")
    return np.exp(np.clip(diff, -RATIO_EXP_CLAMP, RATIO_EXP_CLAMP))


def clipped_objective(ratio, advantage, clip: float) -> np.ndarray:
    if not clip > 0:
        raise ParameterError("clip must be positive")
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage)


def kl_estimate(new_log_prob, old_log_prob) -> float:
    """Mean of (r - 1) - log r, a non-negative estimator of KL(old || new)."""
    log_r = np.clip(np.asarray(new_log_prob) - np.asarray(old_log_prob), -RATIO_EXP_CLAMP, RATIO_EXP_CLAMP)
    return float(np.mean(np.expm1(log_r) - log_r))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def value_loss(critic: Mlp, obs: np.ndarray, targets) -> tuple[float, list[np.ndarray]]:
    """0.5 * mean (V(s) - G)^2 and its parameter gradients."""
    targets = np.asarray(targets, dtype=float).reshape(-1)
    v, cache = critic.forward(np.atleast_2d(obs))
    err = v[:, 0] - targets
    loss = 0.5 * float(np.mean(err * err))
    grads, _ = critic.backward(cache, (err / len(err))[:, None])
    return loss, grads


@dataclass
class SurrogateResult:
    loss: float
    grads: list[np.ndarray]
    log_probs: np.ndarray
    ratio: np.ndarray


def surrogate_loss(actor: Mlp, log_std: np.ndarray, obs: np.ndarray, actions: np.ndarray,
                   old_log_probs, advantages, clip: float) -> SurrogateResult:
    """Negative mean clipped surrogate with gradients for actor weights and log_std.

    The gradient list is the actor parameter gradients followed by the
    log_std gradient.
    """
    obs = np.atleast_2d(obs)
    actions = np.atleast_2d(actions)
    adv = np.asarray(advantages, dtype=float).reshape(-1)
    mean, cache = actor.forward(obs)
    std = np.exp(log_std)
    logp = gaussian_log_prob(actions, mean, std)
    diff = logp - np.asarray(old_log_probs, dtype=float)
    ratio = policy_ratio(logp, old_log_probs)
    surr = clipped_objective(ratio, adv, clip)
    n = len(adv)
    loss = -float(np.mean(surr))

    # the unclipped branch carries gradient when it is the smaller one
    active = ratio * adv <= np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    active &= np.abs(diff) < RATIO_EXP_CLAMP
    dlogp = np.where(active, -ratio * adv / n, 0.0)
    z = (actions - mean) / std
    grad_mean = dlogp[:, None] * z / std
    grad_log_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
    grads, _ = actor.backward(cache, grad_mean)
    return SurrogateResult(loss, grads + [grad_log_std], logp, ratio)


# ---------------------------------------------------------------------------
# agent
# ---------------------------------------------------------------------------

@dataclass
class PpoDiagnostics:
    actor_loss: float
    value_loss: float
    mean_kl: float
    clip_fraction: float
    mean_ratio: float
    epochs_run: int
    kl_stop: bool


class PpoAgent:
    def __init__(self, obs_dim: int, act_dim: int, config: PpoConfig, rng: np.random.Generator):
        self.obs_dim, self.act_dim, self.config = int(obs_dim), int(act_dim), config
        self.actor = Mlp(MlpSpec((self.obs_dim, *config.actor_hidden, self.act_dim)), rng)
        self.critic = Mlp(MlpSpec((self.obs_dim, *config.critic_hidden, 1)), rng)
        self.log_std = np.full(self.act_dim, float(config.init_log_std))
        self.obs_norm = RunningNormalizer(self.obs_dim)
        self.ret_norm = RunningNormalizer(1)
        self.actor_opt = Adam(self.actor.params + [self.log_std], config.actor_lr, owners=(self.actor,))
        self.critic_opt = Adam(self.critic.params, config.critic_lr, owners=(self.critic,))

    def policy_obs(self, raw_obs) -> np.ndarray:
        return self.obs_norm.normalize(raw_obs, clip=self.config.obs_clip)

    def act(self, raw_obs, rng: np.random.Generator | None = None,
            deterministic: bool = False) -> tuple[np.ndarray, float, np.ndarray]:
        """Return (unclipped action, log-probability, normalized observation)."""
        obs = self.policy_obs(raw_obs)
        mean = self.actor(obs)
        if deterministic:
            return mean, 0.0, obs
        sample = gaussian_head(mean, np.exp(self.log_std), rng)
        return sample.action, float(sample.log_prob), obs

    def values(self, obs) -> np.ndarray:
        """Critic estimate in return units."""
        v = self.critic(np.atleast_2d(obs))[:, 0]
        return v * max(float(self.ret_norm.std[0]), 1e-6) + self.ret_norm.mean[0]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"log_std": self.log_std}
        out.update(self.actor.state_dict("actor"))
        out.update(self.critic.state_dict("critic"))
        out.update(self.obs_norm.state_dict("obs_norm"))
        out.update(self.ret_norm.state_dict("ret_norm"))
        out.update(self.actor_opt.state_dict("actor_opt"))
        out.update(self.critic_opt.state_dict("critic_opt"))
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if arrays["log_std"].shape != self.log_std.shape:
            raise ParameterError("action dimension mismatch")
        self.actor.load_state_dict(arrays, "actor")
        self.critic.load_state_dict(arrays, "critic")
        self.log_std[...] = arrays["log_std"]
        self.obs_norm.load_state_dict(arrays, "obs_norm")
        self.ret_norm.load_state_dict(arrays, "ret_norm")
        self.actor_opt.load_state_dict(arrays, "actor_opt")
        self.critic_opt.load_state_dict(arrays, "critic_opt")


def ppo_update(agent: PpoAgent, buffer: RolloutBuffer, config: PpoConfig,
               rng: np.random.Generator) -> PpoDiagnostics:
    """Several epochs of minibatch updates on one batch of episodes.

    The epoch loop stops early once the batch-mean KL estimate exceeds
    ``kl_stop_factor * kl_target``. The observation normalizer absorbs the
    batch afterwards so the next batch sees refreshed statistics.
    """
    if not buffer.episodes:
        raise ParameterError("ppo_update needs at least one episode")
    returns = compute_returns(buffer, config.discount)
    obs = buffer.stacked("obs")
    actions = buffer.stacked("actions")
    old_logp = buffer.stacked("log_probs")
    adv = compute_advantages(returns, agent.values(obs))

    agent.ret_norm.update(returns[:, None])
    targets = agent.ret_norm.normalize(returns[:, None])[:, 0]

    n = len(returns)
    mb = min(config.minibatch_size, n)
    kl_limit = config.kl_stop_factor * config.kl_target
    actor_loss = v_loss = 0.0
    mean_kl, kl_stop, epochs = 0.0, False, 0
    for _ in range(config.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            res = surrogate_loss(agent.actor, agent.log_std, obs[idx], actions[idx], old_logp[idx],
                                 adv[idx], config.clip)
            v_loss, v_grads = value_loss(agent.critic, obs[idx], targets[idx])
            if not (math.isfinite(res.loss) and math.isfinite(v_loss)):
                raise DivergenceError("non-finite PPO loss")
            actor_loss = res.loss
            agent.actor_opt.step(res.grads)
            agent.critic_opt.step(v_grads)
        epochs += 1
        new_logp = gaussian_log_prob(actions, agent.actor(obs), np.exp(agent.log_std))
        mean_kl = kl_estimate(new_logp, old_logp)
        if mean_kl > kl_limit:
            kl_stop = True
            break

    ratio = policy_ratio(new_logp, old_logp)
    agent.obs_norm.update(buffer.stacked("raw_obs"))
    return PpoDiagnostics(
        actor_loss=actor_loss,
        value_loss=v_loss,
        mean_kl=mean_kl,
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > config.clip)),
        mean_ratio=float(np.mean(ratio)),
        epochs_run=epochs,
        kl_stop=kl_stop,
    )
