"""
Training loops for PPO and SAC.

Every batch draws its random streams from the seed pair (seed, batch index),
and checkpoints hold the complete learner state (networks, optimizer
moments, normalizers, replay contents), so training resumed from a
checkpoint reproduces an uninterrupted run exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .env import SUCCESS, DockingEnv, ScenarioConfig
from .errors import ConfigError, ParameterError
from .evaluation import TrainingCurve
from .nn import load_checkpoint, save_checkpoint
from .ppo import PpoAgent, PpoConfig, RolloutBuffer, ppo_update
from .sac import ReplayBuffer, SacAgent, SacConfig, sac_update_step

PPO_LOG_COLUMNS = ("batch", "episodes", "steps", "mean_return", "mean_task_return", "normalized_task_return",
                   "success_fraction", "mean_kl", "clip_fraction", "epochs_run", "kl_stop")
SAC_LOG_COLUMNS = ("batch", "episodes", "steps", "mean_return", "mean_task_return", "normalized_task_return",
                   "success_fraction", "updates", "critic_loss_1", "critic_loss_2", "actor_objective", "entropy")


@dataclass
class TrainState:
    algo: str
    agent: PpoAgent | SacAgent
    seed: int
    mpc_shaping: bool
    batch_episodes: int
    next_batch: int = 0
    env_steps: int = 0
    curve: TrainingCurve = field(default_factory=TrainingCurve)
    shaped_returns: list[float] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    replay: ReplayBuffer | None = None

    @property
    def log_columns(self) -> tuple[str, ...]:
        return PPO_LOG_COLUMNS if self.algo == "ppo" else SAC_LOG_COLUMNS


def new_state(algo: str, scenario: ScenarioConfig, config: PpoConfig | SacConfig, seed: int,
              mpc_shaping: bool, batch_episodes: int) -> TrainState:
    if batch_episodes < 1:
        raise ParameterError("batch_episodes must be positive")
    init_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2**31 - 1]))
    if algo == "ppo":
        if not isinstance(config, PpoConfig):
            raise ConfigError("PPO training needs a PpoConfig")
        agent = PpoAgent(scenario.obs_dim, scenario.act_dim, config, init_rng)
        return TrainState("ppo", agent, int(seed), mpc_shaping, batch_episodes)
    if algo == "sac":
        if not isinstance(config, SacConfig):
            raise ConfigError("SAC training needs a SacConfig")
        agent = SacAgent(scenario.obs_dim, scenario.act_dim, config, init_rng)
        replay = ReplayBuffer(config.buffer_capacity, scenario.obs_dim, scenario.act_dim)
        return TrainState("sac", agent, int(seed), mpc_shaping, batch_episodes, replay=replay)
    raise ConfigError(f"unknown algorithm {algo!r}")


def _batch_streams(seed: int, batch: int, episodes: int):
    children = np.random.SeedSequence([int(seed), int(batch)]).spawn(2 * episodes + 1)
    rngs = [np.random.default_rng(c) for c in children]
    return rngs[0:2 * episodes:2], rngs[1:2 * episodes:2], rngs[-1]


def _ppo_batch(state: TrainState, env: DockingEnv) -> dict:
    agent: PpoAgent = state.agent
    starts, acts, upd = _batch_streams(state.seed, state.next_batch, state.batch_episodes)
    buffer = RolloutBuffer()
    returns, task_returns, successes = [], [], 0
    for start_rng, act_rng in zip(starts, acts):
        obs = env.reset(start_rng)
        buffer.start_episode()
        total = task = 0.0
        while not env.done:
            action, logp, nobs = agent.act(obs, act_rng)
            tr = env.step(action)
            buffer.add(obs, nobs, action, logp, tr.reward)
            total += tr.reward
            task += tr.task_reward
            obs = tr.next_obs
        buffer.end_episode()
        returns.append(total)
        task_returns.append(task)
        successes += env.cause == SUCCESS
    diag = ppo_update(agent, buffer, agent.config, upd)
    state.env_steps += buffer.n_steps
    return {
        "episodes": len(returns),
        "steps": buffer.n_steps,
        "mean_return": float(np.mean(returns)),
        "mean_task_return": float(np.mean(task_returns)),
        "success_fraction": successes / len(returns),
        "mean_kl": diag.mean_kl,
        "clip_fraction": diag.clip_fraction,
        "epochs_run": diag.epochs_run,
        "kl_stop": int(diag.kl_stop),
    }


def _sac_batch(state: TrainState, env: DockingEnv) -> dict:
    agent: SacAgent = state.agent
    cfg: SacConfig = agent.config
    replay = state.replay
    starts, acts, upd = _batch_streams(state.seed, state.next_batch, state.batch_episodes)
    returns, task_returns, successes, steps, updates = [], [], 0, 0, 0
    last = None
    for start_rng, act_rng in zip(starts, acts):
        obs = env.reset(start_rng)
        total = task = 0.0
        while not env.done:
            agent.obs_norm.update(obs)
            if state.env_steps < cfg.warmup_steps:
                action = act_rng.uniform(-1.0, 1.0, size=agent.act_dim)
            else:
                action, _, _ = agent.act(obs, act_rng)
            tr = env.step(action)
            replay.push(obs, action, tr.reward, tr.next_obs, tr.terminal)
            state.env_steps += 1
            steps += 1
            total += tr.reward
            task += tr.task_reward
            obs = tr.next_obs
            if (state.env_steps >= cfg.warmup_steps and state.env_steps % cfg.update_every == 0
                    and len(replay) >= cfg.batch_size):
                last = sac_update_step(agent, replay, cfg, upd)
                updates += 1
        returns.append(total)
        task_returns.append(task)
        successes += env.cause == SUCCESS
    nan = float("nan")
    return {
        "episodes": len(returns),
        "steps": steps,
        "mean_return": float(np.mean(returns)),
        "mean_task_return": float(np.mean(task_returns)),
        "success_fraction": successes / len(returns),
        "updates": updates,
        "critic_loss_1": last.critic_losses[0] if last else nan,
        "critic_loss_2": last.critic_losses[1] if last else nan,
        "actor_objective": last.actor_objective if last else nan,
        "entropy": last.entropy if last else nan,
    }


def train(state: TrainState, scenario: ScenarioConfig, batches: int,
          on_batch: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Run ``batches`` more batches, updating ``state`` in place."""
    if batches < 0:
        raise ParameterError("batches must be non-negative")
    if state.agent.obs_dim != scenario.obs_dim or state.agent.act_dim != scenario.act_dim:
        raise ConfigError("agent dimensions do not match the scenario")
    env = DockingEnv(scenario, mpc_shaping=state.mpc_shaping)
    step_fn = _ppo_batch if state.algo == "ppo" else _sac_batch
    for _ in range(batches):
        row = step_fn(state, env)
        state.curve.append(row["mean_task_return"])
        state.shaped_returns.append(row["mean_return"])
        row = {"batch": state.next_batch, **row}
        row["normalized_task_return"] = float(state.curve.normalized[-1])
        state.log.append(row)
        state.next_batch += 1
        if on_batch is not None:
            on_batch(state, row)
    # refresh normalized column against the full curve
    norm = state.curve.normalized
    for row, v in zip(state.log, norm):
        row["normalized_task_return"] = float(v)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_state(path, state: TrainState, scenario_hash: str, extra_meta: dict | None = None) -> Path:
    arrays = {f"agent.{k}": v for k, v in state.agent.state_dict().items()}
    if state.replay is not None:
        arrays.update(state.replay.state_dict("replay"))
    cfg = state.agent.config
    meta = {
        "algo": state.algo,
        "seed": state.seed,
        "mpc_shaping": state.mpc_shaping,
        "batch_episodes": state.batch_episodes,
        "next_batch": state.next_batch,
        "env_steps": state.env_steps,
        "curve": state.curve.returns,
        "shaped_returns": state.shaped_returns,
        "log": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
                for row in state.log],
        "obs_dim": state.agent.obs_dim,
        "act_dim": state.agent.act_dim,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()},
        "scenario_hash": scenario_hash,
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, arrays, meta)


def load_state(path) -> tuple[TrainState, dict]:
    arrays, meta = load_checkpoint(path)
    algo = meta["algo"]
    cfg_kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in meta["config"].items()}
    cfg = PpoConfig(**cfg_kwargs) if algo == "ppo" else SacConfig(**cfg_kwargs)
    rng = np.random.default_rng(0)
    agent_cls = PpoAgent if algo == "ppo" else SacAgent
    agent = agent_cls(meta["obs_dim"], meta["act_dim"], cfg, rng)
    agent.load_state_dict({k[len("agent."):]: v for k, v in arrays.items() if k.startswith("agent.")})
    replay = ReplayBuffer.from_state_dict(arrays, "replay") if algo == "sac" else None
    state = TrainState(
        algo=algo, agent=agent, seed=int(meta["seed"]), mpc_shaping=bool(meta["mpc_shaping"]),
        batch_episodes=int(meta["batch_episodes"]), next_batch=int(meta["next_batch"]),
        env_steps=int(meta["env_steps"]), curve=TrainingCurve(list(meta["curve"])),
        shaped_returns=list(meta["shaped_returns"]),
        log=[{k: (float("nan") if v is None else v) for k, v in row.items()} for row in meta["log"]],
        replay=replay,
    )
    return state, meta
