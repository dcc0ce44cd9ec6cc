"""
Soft actor-critic with twin critics, target critics, and a uniform replay ring.

Actions live in (-1, 1) through a tanh-squashed Gaussian whose standard
deviation comes from a softplus head. The entropy bonus enters as
``-entropy_coeff * log pi`` in both the critic target and the actor objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ParameterError
from .nn import Adam, Mlp, MlpSpec, RunningNormalizer, gaussian_head, sigmoid, softplus

MIN_STD = 1e-5


@dataclass
class SacConfig:
    discount: float = 0.99
    entropy_coeff: float = 0.2
    soft_rate: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    buffer_capacity: int = 1_000_000
    batch_size: int = 256
    update_every: int = 1
    warmup_steps: int = 1000
    hidden: tuple[int, ...] = (256, 128, 64)
    obs_clip: float = 10.0

    def __post_init__(self):
        if not 0 < self.discount <= 1:
            raise ParameterError("discount must lie in (0, 1]")
        if not self.entropy_coeff >= 0:
            raise ParameterError("entropy_coeff must be non-negative")
        if not 0 < self.soft_rate <= 1:
            raise ParameterError("soft_rate must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ParameterError("buffer_capacity must be at least batch_size")
        if self.update_every < 1:
            raise ParameterError("update_every must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def target_weight(self) -> float:
        """Weight kept on the old target parameters in each soft update."""
        return 1.0 - self.soft_rate


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

_FIELDS = ("obs", "actions", "rewards", "next_obs", "dones")


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling (with replacement).

    Storage grows geometrically up to ``capacity`` so large capacities cost
    nothing until they are used.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ParameterError("capacity must be positive")
        self.capacity, self.obs_dim, self.act_dim = int(capacity), int(obs_dim), int(act_dim)
        self.size = 0
        self.pos = 0
        self._alloc(min(self.capacity, 1024))

    def _alloc(self, n: int) -> None:
        fresh = {
            "obs": np.zeros((n, self.obs_dim)),
            "actions": np.zeros((n, self.act_dim)),
            "rewards": np.zeros(n),
            "next_obs": np.zeros((n, self.obs_dim)),
            "dones": np.zeros(n),
        }
        if hasattr(self, "data"):
            for k in _FIELDS:
                fresh[k][: self.size] = self.data[k][: self.size]
        self.data = fresh

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action, reward: float, next_obs, done: bool) -> "ReplayBuffer":
        if self.size == len(self.data["rewards"]) and self.size < self.capacity:
            self._alloc(min(self.capacity, 2 * self.size))
        i = self.pos
        self.data["obs"][i] = obs
        self.data["actions"][i] = action
        self.data["rewards"][i] = reward
        self.data["next_obs"][i] = next_obs
        self.data["dones"][i] = float(done)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return self

    def order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.pos + np.arange(self.capacity)) % self.capacity

    def contents(self) -> dict[str, np.ndarray]:
        idx = self.order()
        return {k: self.data[k][idx].copy() for k in _FIELDS}

    def sample_indices(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if k < 1 or self.size < k:
            raise ParameterError(f"cannot sample {k} from a buffer holding {self.size}")
        return rng.integers(0, self.size, size=k)

    def sample(self, k: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = self.sample_indices(k, rng)
        return {key: self.data[key][idx] for key in _FIELDS}

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.meta": np.array([self.capacity, self.obs_dim, self.act_dim], dtype=np.int64)}
        for k, v in self.contents().items():
            out[f"{prefix}.{k}"] = v
        return out

    @classmethod
    def from_state_dict(cls, arrays: dict[str, np.ndarray], prefix: str) -> "ReplayBuffer":
        capacity, obs_dim, act_dim = (int(v) for v in arrays[f"{prefix}.meta"])
        buf = cls(capacity, obs_dim, act_dim)
        n = len(arrays[f"{prefix}.rewards"])
        buf._alloc(max(n, len(buf.data["rewards"])))
        for k in _FIELDS:
            buf.data[k][:n] = arrays[f"{prefix}.{k}"]
        buf.size = n
        buf.pos = n % capacity
        return buf


def replay_push(buffer: ReplayBuffer, transition) -> ReplayBuffer:
    """Push a (obs, action, reward, next_obs, done) tuple."""
    return buffer.push(*transition)


def replay_sample(buffer: ReplayBuffer, k: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return buffer.sample(k, rng)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class SacAgent:
    """Actor, two critics and their two targets."""

    def __init__(self, obs_dim: int, act_dim: int, config: SacConfig, rng: np.random.Generator):
        self.obs_dim, self.act_dim, self.config = int(obs_dim), int(act_dim), config
        self.actor = Mlp(MlpSpec((self.obs_dim, *config.hidden, 2 * self.act_dim)), rng)
        critic_spec = MlpSpec((self.obs_dim + self.act_dim, *config.hidden, 1))
        self.critics = [Mlp(critic_spec, rng), Mlp(critic_spec, rng)]
        self.targets = [c.copy() for c in self.critics]
        self.obs_norm = RunningNormalizer(self.obs_dim)
        self.actor_opt = Adam(self.actor.params, config.actor_lr, owners=(self.actor,))
        self.critic_opts = [Adam(c.params, config.critic_lr, owners=(c,)) for c in self.critics]

    def policy_obs(self, raw_obs) -> np.ndarray:
        return self.obs_norm.normalize(raw_obs, clip=self.config.obs_clip)

    def act(self, raw_obs, rng: np.random.Generator | None = None,
            deterministic: bool = False) -> tuple[np.ndarray, float, np.ndarray]:
        obs = self.policy_obs(raw_obs)
        mean, std, _ = actor_distribution(self.actor, obs)
        if deterministic:
            return np.tanh(mean), 0.0, obs
        sample = gaussian_head(mean, std, rng, squash=True)
        return sample.action, float(sample.log_prob), obs

    def state_dict(self, with_optim: bool = True) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.actor.state_dict("actor"))
        for i in range(2):
            out.update(self.critics[i].state_dict(f"critic{i}"))
            out.update(self.targets[i].state_dict(f"target{i}"))
        out.update(self.obs_norm.state_dict("obs_norm"))
        if with_optim:
            out.update(self.actor_opt.state_dict("actor_opt"))
            for i in range(2):
                out.update(self.critic_opts[i].state_dict(f"critic_opt{i}"))
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        self.actor.load_state_dict(arrays, "actor")
        for i in range(2):
            self.critics[i].load_state_dict(arrays, f"critic{i}")
            self.targets[i].load_state_dict(arrays, f"target{i}")
        self.obs_norm.load_state_dict(arrays, "obs_norm")
        if "actor_opt.t" in arrays:
            self.actor_opt.load_state_dict(arrays, "actor_opt")
            for i in range(2):
                self.critic_opts[i].load_state_dict(arrays, f"critic_opt{i}")


def actor_distribution(actor: Mlp, obs: np.ndarray):
    """Mean, std and forward cache of the actor's Gaussian before squashing."""
    out, cache = actor.forward(obs)
    m = out.shape[-1] // 2
    return out[..., :m], softplus(out[..., m:]) + MIN_STD, cache


def bellman_target(rewards, dones, min_next_q, next_log_prob, discount: float, entropy_coeff: float) -> np.ndarray:
    """y = r + discount * (1 - done) * (min Q' - entropy_coeff * log pi)."""
    r = np.asarray(rewards, dtype=float)
    mask = 1.0 - np.asarray(dones, dtype=float)
    return r + discount * mask * (np.asarray(min_next_q) - entropy_coeff * np.asarray(next_log_prob))


def _q(critic: Mlp, obs: np.ndarray, actions: np.ndarray):
    return critic.forward(np.concatenate([obs, actions], axis=-1))


def critic_target(batch: dict[str, np.ndarray], agent: SacAgent, config: SacConfig,
                  noise: np.ndarray) -> np.ndarray:
    """Targets from the target critics at a fresh actor sample for s'.

    ``batch`` holds normalized observations; ``noise`` are the standard
    normal draws behind the next-action sample.
    """
    next_obs = batch["next_obs"]
    mean, std, _ = actor_distribution(agent.actor, next_obs)
    sample = gaussian_head(mean, std, squash=True, noise=noise)
    q1 = _q(agent.targets[0], next_obs, sample.action)[0][:, 0]
    q2 = _q(agent.targets[1], next_obs, sample.action)[0][:, 0]
    return bellman_target(batch["rewards"], batch["dones"], np.minimum(q1, q2), sample.log_prob,
                          config.discount, config.entropy_coeff)


def critic_loss(critic: Mlp, obs: np.ndarray, actions: np.ndarray, targets) -> tuple[float, list[np.ndarray]]:
    """mean (Q(s, a) - y)^2 with y held fixed."""
    y = np.asarray(targets, dtype=float).reshape(-1)
    q, cache = _q(critic, np.atleast_2d(obs), np.atleast_2d(actions))
    err = q[:, 0] - y
    grads, _ = critic.backward(cache, (2.0 * err / len(y))[:, None])
    return float(np.mean(err * err)), grads


@dataclass
class ActorResult:
    objective: float
    grads: list[np.ndarray]
    entropy: float


def actor_objective(actor: Mlp, critics: list[Mlp], obs: np.ndarray, entropy_coeff: float,
                    noise: np.ndarray) -> ActorResult:
    """mean(min_i Q_i(s, a~) - entropy_coeff * log pi(a~|s)) and its gradient in the actor weights.

    The sample a~ = tanh(mean + std * noise) is reparameterized, so the
    gradient flows through it into the critics' action inputs.
    """
    obs = np.atleast_2d(obs)
    out, cache = actor.forward(obs)
    m = out.shape[-1] // 2
    mean, pre_std = out[:, :m], out[:, m:]
    std = softplus(pre_std) + MIN_STD
    sample = gaussian_head(mean, std, squash=True, noise=noise)
    a = sample.action

    qs, grad_a = [], []
    for critic in critics:
        q, c_cache = _q(critic, obs, a)
        _, g_in = critic.backward(c_cache, np.ones_like(q))
        qs.append(q[:, 0])
        grad_a.append(g_in[:, obs.shape[1]:])
    pick = qs[0] <= qs[1]
    q_min = np.where(pick, qs[0], qs[1])
    g_a = np.where(pick[:, None], grad_a[0], grad_a[1])

    n = len(obs)
    objective = float(np.mean(q_min - entropy_coeff * sample.log_prob))
    # d log pi / du = 2 tanh(u), d log pi / d std (explicit) = -1 / std
    g_u = g_a * (1.0 - a * a) - entropy_coeff * 2.0 * a
    g_mean = g_u / n
    g_std = (g_u * noise + entropy_coeff / std) / n
    g_pre = g_std * sigmoid(pre_std)
    grads, _ = actor.backward(cache, np.concatenate([g_mean, g_pre], axis=1))
    return ActorResult(objective, grads, float(-np.mean(sample.log_prob)))


def soft_update(target: list[np.ndarray], online: list[np.ndarray], weight: float) -> list[np.ndarray]:
    """target <- weight * target + (1 - weight) * online, in place."""
    if len(target) != len(online) or any(t.shape != o.shape for t, o in zip(target, online)):
        raise ParameterError("target and online parameter shapes differ")
    for t, o in zip(target, online):
        t *= weight
        t += (1.0 - weight) * o
    return target


@dataclass
class SacDiagnostics:
    critic_losses: tuple[float, float]
    actor_objective: float
    entropy: float
    mean_target: float


def sac_update_step(agent: SacAgent, buffer: ReplayBuffer, config: SacConfig,
                    rng: np.random.Generator) -> SacDiagnostics:
    """One critic step on both critics, one actor step, one soft update."""
    if len(buffer) < config.batch_size:
        raise ParameterError("replay buffer smaller than the batch size")
    raw = buffer.sample(config.batch_size, rng)
    batch = dict(raw)
    batch["obs"] = agent.policy_obs(raw["obs"])
    batch["next_obs"] = agent.policy_obs(raw["next_obs"])
    m = agent.act_dim

    y = critic_target(batch, agent, config, rng.standard_normal((config.batch_size, m)))
    losses = []
    for critic, opt in zip(agent.critics, agent.critic_opts):
        loss, grads = critic_loss(critic, batch["obs"], batch["actions"], y)
        if not math.isfinite(loss):
            raise DivergenceError("non-finite critic loss")
        opt.step(grads)
        losses.append(loss)

    res = actor_objective(agent.actor, agent.critics, batch["obs"], config.entropy_coeff,
                          rng.standard_normal((config.batch_size, m)))
    if not math.isfinite(res.objective):
        raise DivergenceError("non-finite actor objective")
    agent.actor_opt.step([-g for g in res.grads])

    for target, critic in zip(agent.targets, agent.critics):
        soft_update(target.params, critic.params, config.target_weight)
        target.bump()
    return SacDiagnostics((losses[0], losses[1]), res.objective, res.entropy, float(np.mean(y)))
