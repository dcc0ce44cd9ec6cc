"""
Monte Carlo evaluation, training curves, and paired method comparison.

Run ``i`` of every report draws its initial condition from the seed pair
(root_seed, i), so reports with the same root seed face identical starts
(common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import attitude_error_angle
from .env import SUCCESS, DockingEnv, ScenarioConfig
from .errors import ConfigError, ParameterError
from .mpc import HorizonConfig, TrajectoryPlan, control_lookup, plan_trajectory

METHODS = ("ppo", "sac", "ppo-mpc", "sac-mpc", "mpc-only", "null")


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class Policy:
    """Maps observations to normalized actions in [-1, 1]."""

    name = "policy"
    act_dim: int | None = None

    def reset(self, env: DockingEnv, rng: np.random.Generator) -> None:
        self.rng = rng

    def act(self, obs: np.ndarray, env: DockingEnv) -> np.ndarray:
        raise NotImplementedError


class NullPolicy(Policy):
    """Always commands zero thrust."""

    name = "null"

    def act(self, obs, env):
        return np.zeros(env.act_dim)


def control_to_action(u: np.ndarray, env: DockingEnv) -> np.ndarray:
    """Inverse of the environment's action scaling for a 6-vector wrench."""
    p = env.params
    if env.scenario.planar:
        return np.array([u[0] / p.force_limit, u[1] / p.force_limit, u[5] / p.torque_limit])
    return np.concatenate([u[:3] / p.force_limit, u[3:] / p.torque_limit])


class MpcPolicy(Policy):
    """Replays an MPC plan made at episode start.

    Args:
        horizon: planner horizon; defaults to the scenario's oracle horizon.
        replan_every: if set, replan from the current state every that many
            control steps (receding horizon) instead of pure replay.
    """

    name = "mpc-only"

    def __init__(self, horizon: HorizonConfig | None = None, replan_every: int | None = None):
        self.horizon = horizon
        self.replan_every = replan_every
        self.plan: TrajectoryPlan | None = None
        self.first_plan: TrajectoryPlan | None = None

    def _plan(self, env: DockingEnv) -> TrajectoryPlan:
        sc = env.scenario
        horizon = self.horizon if self.horizon is not None else sc.oracle_horizon()
        aligned = math.degrees(attitude_error_angle(env.x[6:10], sc.goal_state.quat)) < sc.stabilization.att_tol_deg
        return plan_trajectory(env.state, sc.goal_state, env.params, horizon, sc.constraints(),
                               start_time=env.time, keep_out_active=not aligned)

    def reset(self, env, rng):
        super().reset(env, rng)
        self.plan = self.first_plan = self._plan(env)

    def act(self, obs, env):
        if self.replan_every and env.steps and env.steps % self.replan_every == 0:
            self.plan = self._plan(env)
        return control_to_action(control_lookup(self.plan, env.time), env)


class AgentPolicy(Policy):
    """Wraps a trained PPO or SAC agent (deterministic by default)."""

    def __init__(self, agent, name: str = "agent", deterministic: bool = True):
        self.agent = agent
        self.name = name
        self.deterministic = deterministic
        self.act_dim = agent.act_dim

    def act(self, obs, env):
        action, _, _ = self.agent.act(obs, self.rng, deterministic=self.deterministic)
        return action


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def control_effort(controls, dt: float) -> float:
    """Sum of |force_k| * dt over a sequence of 6-vector wrenches (torque excluded)."""
    if not dt > 0:
        raise ParameterError("dt must be positive")
    u = np.asarray(controls, dtype=float)
    if u.size == 0:
        return 0.0
    u = np.atleast_2d(u)
    return float(np.linalg.norm(u[:, :3], axis=1).sum() * dt)


def torque_effort(controls, dt: float) -> float:
    u = np.atleast_2d(np.asarray(controls, dtype=float))
    if u.size == 0:
        return 0.0
    return float(np.linalg.norm(u[:, 3:6], axis=1).sum() * dt)


@dataclass
class RunRecord:
    run: int
    success: bool
    cause: str
    steps: int
    duration: float
    pos_error: float
    vel_error: float
    att_error_deg: float
    control_effort: float
    torque_effort: float
    total_reward: float
    task_reward: float


RECORD_FIELDS = tuple(RunRecord.__dataclass_fields__)


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return 0.0, 0.0
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class MetricsReport:
    method: str
    scenario: str
    root_seed: int
    records: list[RunRecord]
    config_hash: str = ""

    @property
    def runs(self) -> int:
        return len(self.records)

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.records)

    @property
    def success_ratio(self) -> float:
        return self.successes / self.runs if self.runs else 0.0

    def stat(self, name: str) -> tuple[float, float]:
        return mean_std([getattr(r, name) for r in self.records])

    @property
    def pos_error(self) -> tuple[float, float]:
        return self.stat("pos_error")

    @property
    def att_error(self) -> tuple[float, float]:
        return self.stat("att_error_deg")

    @property
    def control_effort(self) -> tuple[float, float]:
        return self.stat("control_effort")

    def summary(self) -> dict:
        out = {
            "method": self.method,
            "scenario": self.scenario,
            "root_seed": self.root_seed,
            "config_hash": self.config_hash,
            "runs": self.runs,
            "successes": self.successes,
            "success_ratio": self.success_ratio,
        }
        for key in ("pos_error", "vel_error", "att_error_deg", "control_effort", "torque_effort",
                    "total_reward", "task_reward"):
            m, s = self.stat(key)
            out[f"{key}_mean"] = m
            out[f"{key}_std"] = s
        return out


def easy_scenario(scenario: ScenarioConfig, fraction: float = 1.0 / 3.0) -> ScenarioConfig:
    """Starts drawn from the central ``fraction`` of the zone with the goal attitude."""
    if not 0 < fraction <= 1:
        raise ParameterError("fraction must lie in (0, 1]")
    centre = 0.5 * (scenario.zone_lower + scenario.zone_upper)
    half = 0.5 * fraction * (scenario.zone_upper - scenario.zone_lower)
    return scenario.replace(name=f"{scenario.name}-easy", start_lower=centre - half, start_upper=centre + half,
                            randomize_attitude=False)


def run_seeds(root_seed: int, run: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (initial-condition, policy) streams for one run."""
    a, b = np.random.SeedSequence([int(root_seed), int(run)]).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def run_episode(env: DockingEnv, policy: Policy, start_rng: np.random.Generator,
                policy_rng: np.random.Generator, run: int = 0, trace: list | None = None) -> RunRecord:
    obs = env.reset(start_rng)
    policy.reset(env, policy_rng)
    controls = []
    total = task = 0.0
    while not env.done:
        action = policy.act(obs, env)
        tr = env.step(action)
        controls.append(tr.control)
        total += tr.reward
        task += tr.task_reward
        obs = tr.next_obs
        if trace is not None:
            trace.append((env.time, tr))
    sc = env.scenario
    goal = sc.goal_state
    dt = sc.control_period
    return RunRecord(
        run=run,
        success=env.cause == SUCCESS,
        cause=env.cause,
        steps=env.steps,
        duration=env.time,
        pos_error=float(np.linalg.norm(env.x[0:3] - goal.rel_pos)),
        vel_error=float(np.linalg.norm(env.x[3:6] - goal.rel_vel)),
        att_error_deg=math.degrees(attitude_error_angle(env.x[6:10], goal.quat)),
        control_effort=control_effort(controls, dt),
        torque_effort=torque_effort(controls, dt),
        total_reward=total,
        task_reward=task,
    )


def run_monte_carlo(policy: Policy, scenario: ScenarioConfig, n_runs: int, root_seed: int,
                    method: str | None = None, mpc_shaping: bool = False, config_hash: str = "") -> MetricsReport:
    """Evaluate ``policy`` over ``n_runs`` independent seeded episodes."""
    if n_runs < 1:
        raise ParameterError("n_runs must be at least 1")
    if policy.act_dim is not None and policy.act_dim != scenario.act_dim:
        raise ConfigError(f"policy acts in {policy.act_dim} dimensions, scenario needs {scenario.act_dim}")
    env = DockingEnv(scenario, mpc_shaping=mpc_shaping)
    records = []
    for i in range(n_runs):
        start_rng, policy_rng = run_seeds(root_seed, i)
        records.append(run_episode(env, policy, start_rng, policy_rng, run=i))
    return MetricsReport(method or policy.name, scenario.name, int(root_seed), records, config_hash)


# ---------------------------------------------------------------------------
# training curves
# ---------------------------------------------------------------------------

@dataclass
class TrainingCurve:
    """Per-batch mean returns and their min-max normalization over the curve so far."""

    returns: list[float] = field(default_factory=list)

    def append(self, value: float) -> "TrainingCurve":
        self.returns.append(float(value))
        return self

    @property
    def batches(self) -> np.ndarray:
        return np.arange(len(self.returns))

    @property
    def normalized(self) -> np.ndarray:
        r = np.asarray(self.returns, dtype=float)
        if r.size == 0:
            return r
        lo, hi = r.min(), r.max()
        if hi - lo <= 0:
            return np.zeros_like(r)
        return (r - lo) / (hi - lo)

    def final_quarter_mean(self) -> float:
        r = np.asarray(self.returns, dtype=float)
        if r.size == 0:
            raise ParameterError("empty training curve")
        k = max(1, r.size // 4)
        return float(r[-k:].mean())


def record_training_curve(batch_returns) -> TrainingCurve:
    values = list(batch_returns)
    if not values:
        raise ParameterError("need at least one batch")
    curve = TrainingCurve()
    for v in values:
        curve.append(v)
    return curve


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

COMPARE_METRICS = ("success", "pos_error", "att_error_deg", "control_effort")


def _metric(report: MetricsReport, name: str) -> np.ndarray:
    return np.array([float(getattr(r, name)) for r in report.records])


@dataclass
class Comparison:
    ranking: list[str]
    intervals: dict[str, dict[str, tuple[float, float, float]]]
    deltas: dict[str, dict[str, tuple[float, float, float]]]
    reference: str

    def rows(self) -> list[dict]:
        out = []
        for method in self.ranking:
            row = {"method": method}
            for metric, (m, lo, hi) in self.intervals[method].items():
                row[f"{metric}_mean"], row[f"{metric}_lo"], row[f"{metric}_hi"] = m, lo, hi
            for metric, (m, lo, hi) in self.deltas[method].items():
                row[f"delta_{metric}"], row[f"delta_{metric}_lo"], row[f"delta_{metric}_hi"] = m, lo, hi
            out.append(row)
        return out


def compare_methods(reports: list[MetricsReport], n_boot: int = 1000, seed: int = 0,
                    level: float = 0.95) -> Comparison:
    """Rank methods and bootstrap paired deltas against the first report.

    Runs are paired by index, which is valid because all reports share the
    root seed and scenario. The ranking sorts by success ratio, then mean
    position error, then name.
    """
    if len(reports) < 2:
        raise ParameterError("need at least two reports to compare")
    base = reports[0]
    for r in reports[1:]:
        if (r.scenario, r.root_seed, r.runs, r.config_hash) != (base.scenario, base.root_seed, base.runs, base.config_hash):
            raise ConfigError(f"report {r.method!r} does not share scenario, seed and run count with {base.method!r}")
    names = [r.method for r in reports]
    if len(set(names)) != len(names):
        raise ParameterError("method names must be unique")

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, base.runs, size=(n_boot, base.runs))
    q = (100 * (1 - level) / 2, 100 * (1 + level) / 2)

    def interval(values: np.ndarray) -> tuple[float, float, float]:
        boots = values[idx].mean(axis=1)
        lo, hi = np.percentile(boots, q)
        return float(values.mean()), float(lo), float(hi)

    intervals, deltas = {}, {}
    for r in reports:
        intervals[r.method] = {m: interval(_metric(r, m)) for m in COMPARE_METRICS}
        deltas[r.method] = {m: interval(_metric(r, m) - _metric(base, m)) for m in COMPARE_METRICS}
    ranking = sorted(names, key=lambda n: (-intervals[n]["success"][0], intervals[n]["pos_error"][0], n))
    return Comparison(ranking, intervals, deltas, base.method)


def report_from_rows(rows: list[dict], method: str, scenario: str, root_seed: int, config_hash: str = "") -> MetricsReport:
    """Rebuild a report from per-run CSV rows (string values accepted)."""
    records = []
    for row in rows:
        kw = {}
        for name, f in RunRecord.__dataclass_fields__.items():
            v = row[name]
            if f.type in ("int",):
                kw[name] = int(v)
            elif f.type in ("bool",):
                kw[name] = v in (True, "True", "true", "1", 1)
            elif f.type in ("str",):
                kw[name] = str(v)
            else:
                kw[name] = float(v)
        records.append(RunRecord(**kw))
    return MetricsReport(method, scenario, root_seed, records, config_hash)


def record_dict(record: RunRecord) -> dict:
    return asdict(record)
