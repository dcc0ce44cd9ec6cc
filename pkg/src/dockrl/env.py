"""
Docking and planar-stabilization environments.

Both scenarios run the same 13-state rigid-body model. Planar mode keeps
the craft in the x-y plane with yaw only: the policy commands
(f_x, f_y, tau_z) and observes

    [dx, dy, dvx, dvy, dyaw, yaw_rate, t / T]

while docking mode commands the full body wrench and observes

    [dr (3), dv (3), attitude error vector (3), body rate (3), t / T].

Errors are taken relative to the goal state. Policy actions live in
[-1, 1] and are scaled to the thrust box before integration.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    POS, QUAT, RATE, VEL,
    ControlInput, SpacecraftParams, StateVector,
    attitude_error_angle, attitude_error_quat, quat_from_axis_angle, random_quaternion, rk4_array,
)
from .errors import ConfigError, DynamicsInputError, EpisodeError, IntegrationError, ParameterError
from .mpc import (
    ConstraintSet, HorizonConfig, TrajectoryPlan,
    default_input_weight, default_state_weight, plan_trajectory, reference_lookup,
)
from .slosh import SloshParams, SloshState, fill_to_params, slosh_force, slosh_step

PLANAR = "planar-3dof"
DOCKING = "docking-6dof"
MODES = (PLANAR, DOCKING)

OK = "ok"
ZONE_EXIT = "zone-exit"
KEEPOUT = "keepout-violation"
SUCCESS = "success"
TIME_LIMIT = "time-limit"


@dataclass(frozen=True)
class StabilizationCriteria:
    pos_tol: float = 0.05  # m
    vel_tol: float = 0.1  # m/s
    att_tol_deg: float = 5.0
    rate_tol_deg: float = 1.0  # deg/s
    dwell_steps: int = 10

    def __post_init__(self):
        if min(self.pos_tol, self.vel_tol, self.att_tol_deg, self.rate_tol_deg) <= 0:
            raise ConfigError("stabilization tolerances must be positive")
        if self.dwell_steps < 1:
            raise ConfigError("dwell_steps must be at least 1")


@dataclass(frozen=True)
class RewardWeights:
    """Reward coefficients.

    Attributes:
        control_weight: P, quadratic weight on the normalized action.
        state_error_weight: weight on the reference-tracking error vector.
        rot_bonus: weight of the attitude bonus (applied to the angle error).
        pos_bonus: weight of the position bonus (applied to the distance error).
        slosh_force_weight: scalar weight on |f_s|^2.
        slosh_torque_weight: scalar weight on |tau_s|^2.
        k0, k1: sharpness schedule k(t) = k0 + k1 t.
    """

    control_weight: np.ndarray
    state_error_weight: np.ndarray
    rot_bonus: float = 100.0
    pos_bonus: float = 10.0
    slosh_force_weight: float = 5.0
    slosh_torque_weight: float = 10.0
    k0: float = 1.0
    k1: float = 0.15

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.control_weight, dtype=float))
        m = np.atleast_2d(np.asarray(self.state_error_weight, dtype=float))
        for mat, name, strict in ((p, "control_weight", True), (m, "state_error_weight", False)):
            if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T):
                raise ConfigError(f"{name} must be a symmetric square matrix")
            low = np.linalg.eigvalsh(mat).min()
            if low <= 0 if strict else low < -1e-12:
                raise ConfigError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
        object.__setattr__(self, "control_weight", p)
        object.__setattr__(self, "state_error_weight", m)
        if not (self.rot_bonus > 0 and self.pos_bonus > 0):
            raise ConfigError("bonus weights must be positive")
        if self.slosh_force_weight < 0 or self.slosh_torque_weight < 0:
            raise ConfigError("slosh weights must be non-negative")
        if not (self.k0 > 0 and self.k1 >= 0):
            raise ConfigError("k schedule needs k0 > 0 and k1 >= 0")

    def k(self, t: float) -> float:
        return self.k0 + self.k1 * t


@dataclass(frozen=True)
class MpcSettings:
    """Planner used for reward shaping and the MPC-only policy."""

    steps: int = 30
    dt: float = 0.1
    replan_every: int = 10
    terminal_scale: float = 10.0
    input_per_axis: float = 10.0
    weights: tuple[float, float, float, float] = (1.0, 10.0, 5.0, 50.0)  # pos, vel, att, rate
    # open-loop replay policy: one long plan per episode
    oracle_steps: int = 60
    oracle_dt: float = 0.5
    oracle_terminal_scale: float = 100.0

    def __post_init__(self):
        if self.steps < 1 or self.replan_every < 1 or not self.dt > 0:
            raise ConfigError("MPC horizon, step and replan interval must be positive")
        if self.oracle_steps < 1 or not self.oracle_dt > 0:
            raise ConfigError("oracle horizon and step must be positive")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    mode: str
    control_period: float
    episode_limit: float
    zone_lower: np.ndarray
    zone_upper: np.ndarray
    keep_out_radius: float
    stabilization: StabilizationCriteria
    spacecraft: SpacecraftParams
    reward_weights: RewardWeights
    goal_state: StateVector = field(default_factory=StateVector.at_rest)
    slosh: SloshParams | None = None
    fuel_mass_range: tuple[float, float] | None = None
    fill_fraction: float | None = None
    start_lower: np.ndarray | None = None
    start_upper: np.ndarray | None = None
    randomize_attitude: bool = True
    substeps: int = 10
    mpc: MpcSettings = field(default_factory=MpcSettings)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.control_period > 0 and self.episode_limit > 0):
            raise ConfigError("control_period and episode_limit must be positive")
        if self.substeps < 1:
            raise ConfigError("substeps must be positive")
        for name in ("zone_lower", "zone_upper", "start_lower", "start_upper"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float).reshape(-1)
            if v.shape != (3,):
                raise ConfigError(f"{name} must have 3 entries")
            object.__setattr__(self, name, v)
        if np.any(self.zone_lower >= self.zone_upper):
            raise ConfigError("admissible zone is empty")
        if self.keep_out_radius < 0:
            raise ConfigError("keep_out_radius must be non-negative")
        if not in_box(self.goal_state.rel_pos, self.zone_lower, self.zone_upper):
            raise ConfigError("goal lies outside the admissible zone")
        n = self.act_dim
        if self.reward_weights.control_weight.shape != (n, n):
            raise ConfigError(f"control_weight must be {n}x{n} for mode {self.mode}")
        e = self.error_dim
        if self.reward_weights.state_error_weight.shape != (e, e):
            raise ConfigError(f"state_error_weight must be {e}x{e} for mode {self.mode}")
        if self.fuel_mass_range is not None:
            lo, hi = self.fuel_mass_range
            if not 0 <= lo <= hi:
                raise ConfigError("fuel_mass_range must satisfy 0 <= low <= high")
        if self.fill_fraction is not None and not 0 <= self.fill_fraction <= 1:
            raise ConfigError("fill_fraction must lie in [0, 1]")

    @property
    def planar(self) -> bool:
        return self.mode == PLANAR

    @property
    def act_dim(self) -> int:
        return 3 if self.planar else 6

    @property
    def error_dim(self) -> int:
        return 6 if self.planar else 12

    @property
    def obs_dim(self) -> int:
        return self.error_dim + 1

    @property
    def max_steps(self) -> int:
        return int(math.ceil(self.episode_limit / self.control_period - 1e-9))

    @property
    def slosh_enabled(self) -> bool:
        return self.slosh is not None

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def start_box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.zone_lower if self.start_lower is None else self.start_lower
        hi = self.zone_upper if self.start_upper is None else self.start_upper
        return lo, hi

    def constraints(self) -> ConstraintSet:
        lo = np.full(13, -np.inf)
        hi = np.full(13, np.inf)
        lo[POS], hi[POS] = self.zone_lower, self.zone_upper
        return ConstraintSet.for_spacecraft(self.spacecraft, lo, hi, self.keep_out_radius, planar=self.planar)

    def horizon(self) -> HorizonConfig:
        s = self.mpc
        omega = default_state_weight(*s.weights)
        return HorizonConfig(s.steps, s.dt, omega, default_input_weight(self.spacecraft, s.input_per_axis),
                             s.terminal_scale * omega)

    def oracle_horizon(self) -> HorizonConfig:
        s = self.mpc
        omega = default_state_weight(*s.weights)
        return HorizonConfig(s.oracle_steps, s.oracle_dt, omega,
                             default_input_weight(self.spacecraft, s.input_per_axis),
                             s.oracle_terminal_scale * omega)


def in_box(p, lo, hi) -> bool:
    return bool(np.all(p >= lo) and np.all(p <= hi))


# ---------------------------------------------------------------------------
# errors and observations
# ---------------------------------------------------------------------------

def _yaw(q: np.ndarray) -> float:
    return 2.0 * math.atan2(q[2], q[3])


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def error_vector(x: np.ndarray, ref: np.ndarray, planar: bool) -> np.ndarray:
    """Tracking error of state ``x`` against reference ``ref`` (both 13-arrays)."""
    if planar:
        return np.array([
            x[0] - ref[0], x[1] - ref[1], x[3] - ref[3], x[4] - ref[4],
            _wrap(_yaw(x[QUAT]) - _yaw(ref[QUAT])), x[12] - ref[12],
        ])
    q_err = attitude_error_quat(x[QUAT], ref[QUAT])
    return np.concatenate([x[POS] - ref[POS], x[VEL] - ref[VEL], 2.0 * q_err[:3], x[RATE] - ref[RATE]])


def observe(x: np.ndarray, goal: np.ndarray, t: float, scenario: ScenarioConfig) -> np.ndarray:
    return np.append(error_vector(x, goal, scenario.planar), t / scenario.episode_limit)


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------

def _bonus(weight: float, k: float, err: float) -> float:
    z = k * err
    # weight / (1 + e^z), written to avoid overflow for large z
    if z > 0:
        e = math.exp(-z)
        return weight * e / (1.0 + e)
    return weight / (1.0 + math.exp(z))


def reward_standalone(state: StateVector, action, slosh, t: float, weights: RewardWeights,
                      goal: StateVector | None = None) -> float:
    """Task reward: control cost, two sigmoid bonuses and slosh penalties.

    ``action`` is the normalized command; it is clamped to [-1, 1] first.
    The rotation bonus uses the geodesic attitude error to the goal [rad],
    the position bonus the distance to the goal [m].
    """
    goal = StateVector.at_rest() if goal is None else goal
    a = np.clip(np.asarray(action, dtype=float).reshape(-1), -1.0, 1.0)
    k = weights.k(t)
    delta = attitude_error_angle(state.quat, goal.quat)
    sigma = float(np.linalg.norm(state.rel_pos - goal.rel_pos))
    r = -float(a @ weights.control_weight @ a)
    r += _bonus(weights.rot_bonus, k, delta) + _bonus(weights.pos_bonus, k, sigma)
    if slosh is not None:
        r -= weights.slosh_force_weight * float(slosh.force @ slosh.force)
        r -= weights.slosh_torque_weight * float(slosh.torque @ slosh.torque)
    return r


def tracking_penalty(state: StateVector, reference: StateVector, weights: RewardWeights, planar: bool) -> float:
    e = error_vector(state.as_array(), reference.as_array(), planar)
    return float(e @ weights.state_error_weight @ e)


def reward_mpc(state: StateVector, reference: StateVector | None, action, slosh, t: float,
               weights: RewardWeights, goal: StateVector | None = None, planar: bool | None = None) -> float:
    """Task reward minus the weighted error against an MPC reference state."""
    if reference is None:
        raise ParameterError("MPC-shaped reward needs a reference state")
    if planar is None:
        planar = weights.state_error_weight.shape[0] == 6
    return (reward_standalone(state, action, slosh, t, weights, goal)
            - tracking_penalty(state, reference, weights, planar))


# ---------------------------------------------------------------------------
# termination rules
# ---------------------------------------------------------------------------

def stabilization_check(state: StateVector, goal: StateVector, criteria: StabilizationCriteria) -> bool:
    """Instantaneous test of all four tolerances; the environment adds the dwell."""
    return bool(
        np.linalg.norm(state.rel_pos - goal.rel_pos) < criteria.pos_tol
        and np.linalg.norm(state.rel_vel - goal.rel_vel) < criteria.vel_tol
        and math.degrees(attitude_error_angle(state.quat, goal.quat)) < criteria.att_tol_deg
        and math.degrees(float(np.linalg.norm(state.ang_vel - goal.ang_vel))) < criteria.rate_tol_deg
    )


def zone_and_keepout_check(state: StateVector, scenario: ScenarioConfig) -> str:
    """Zone exit, keep-out violation, or ok.

    The keep-out sphere (around the target at the frame origin) only binds
    while the attitude error to the goal exceeds the alignment tolerance;
    an aligned craft may enter it on final approach.
    """
    if not in_box(state.rel_pos, scenario.zone_lower, scenario.zone_upper):
        return ZONE_EXIT
    if scenario.keep_out_radius > 0 and np.linalg.norm(state.rel_pos) < scenario.keep_out_radius:
        att = math.degrees(attitude_error_angle(state.quat, scenario.goal_state.quat))
        if att >= scenario.stabilization.att_tol_deg:
            return KEEPOUT
    return OK


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    obs: np.ndarray
    action: np.ndarray
    control: np.ndarray
    reward: float
    task_reward: float
    next_state: np.ndarray
    next_obs: np.ndarray
    done: bool
    cause: str | None
    info: dict

    @property
    def terminal(self) -> bool:
        """True for genuine terminations (time-limit truncation excluded)."""
        return self.done and self.cause != TIME_LIMIT


def sample_initial_state(scenario: ScenarioConfig, rng: np.random.Generator, max_tries: int = 10_000) -> StateVector:
    """Uniform position in the start box outside the keep-out sphere, random attitude, at rest."""
    lo, hi = scenario.start_box()
    if scenario.planar:
        lo, hi = lo.copy(), hi.copy()
        lo[2] = hi[2] = 0.0
    corner = np.max(np.maximum(np.abs(lo), np.abs(hi)))
    if scenario.keep_out_radius > 0 and np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi))) < scenario.keep_out_radius:
        raise ConfigError(f"start region (extent {corner:g} m) lies inside the keep-out sphere")
    for _ in range(max_tries):
        pos = rng.uniform(lo, hi)
        if np.linalg.norm(pos) >= scenario.keep_out_radius:
            break
    else:
        raise ConfigError("could not sample a start position outside the keep-out sphere")
    if not scenario.randomize_attitude:
        quat = scenario.goal_state.quat
    elif scenario.planar:
        quat = quat_from_axis_angle([0.0, 0.0, 1.0], rng.uniform(-math.pi, math.pi))
    else:
        quat = random_quaternion(rng)
    return StateVector.at_rest(pos, quat)


def episode_slosh(scenario: ScenarioConfig, rng: np.random.Generator) -> SloshParams | None:
    if scenario.slosh is None:
        return None
    if scenario.fill_fraction is not None:
        s = scenario.slosh
        return fill_to_params(scenario.fill_fraction, s.tank_radius, s.fluid_density, s.natural_freq,
                              s.damping_ratio, s.attach_offset)
    if scenario.fuel_mass_range is not None:
        return dataclasses.replace(scenario.slosh, fuel_mass=float(rng.uniform(*scenario.fuel_mass_range)))
    return scenario.slosh


class DockingEnv:
    """One episode at a time of the configured scenario.

    Args:
        scenario: scenario definition.
        mpc_shaping: if true, rewards include the tracking penalty against a
            receding-horizon MPC reference, replanned every
            ``scenario.mpc.replan_every`` control steps.
    """

    def __init__(self, scenario: ScenarioConfig, mpc_shaping: bool = False):
        self.scenario = scenario
        self.mpc_shaping = mpc_shaping
        self.params = scenario.spacecraft
        self._goal = scenario.goal_state.as_array()
        self._limits = np.array([self.params.force_limit, self.params.torque_limit])
        self._constraints = scenario.constraints() if mpc_shaping else None
        self._horizon = scenario.horizon() if mpc_shaping else None
        self.done = True
        self.started = False

    # -- properties ---------------------------------------------------------
    @property
    def obs_dim(self) -> int:
        return self.scenario.obs_dim

    @property
    def act_dim(self) -> int:
        return self.scenario.act_dim

    @property
    def state(self) -> StateVector:
        return StateVector.from_array(self.x)

    @property
    def time(self) -> float:
        return self.steps * self.scenario.control_period

    def observation(self) -> np.ndarray:
        return observe(self.x, self._goal, self.time, self.scenario)

    # -- episode ------------------------------------------------------------
    def reset(self, rng: np.random.Generator, initial: StateVector | None = None) -> np.ndarray:
        sc = self.scenario
        state = sample_initial_state(sc, rng) if initial is None else initial
        self.x = state.as_array().copy()
        self.slosh_params = episode_slosh(sc, rng)
        self.slosh_state = SloshState()
        self.dist = np.zeros(6)
        self.steps = 0
        self.dwell = 0
        self.done = False
        self.started = True
        self.cause: str | None = None
        self.plan: TrajectoryPlan | None = None
        self.plans_made = 0
        self.aligned = False
        return self.observation()

    def replan(self) -> TrajectoryPlan:
        """Plan from the current state; the keep-out constraint is dropped once aligned."""
        sc = self.scenario
        constraints = self._constraints if self._constraints is not None else sc.constraints()
        horizon = self._horizon if self._horizon is not None else sc.horizon()
        self.plan = plan_trajectory(self.state, sc.goal_state, self.params, horizon, constraints,
                                    start_time=self.time, keep_out_active=not self._is_aligned())
        self.plans_made += 1
        return self.plan

    def _is_aligned(self) -> bool:
        att = math.degrees(attitude_error_angle(self.x[QUAT], self._goal[QUAT]))
        return att < self.scenario.stabilization.att_tol_deg

    def scale(self, action: np.ndarray) -> np.ndarray:
        fl, tl = self._limits
        if self.scenario.planar:
            return np.array([action[0] * fl, action[1] * fl, 0.0, 0.0, 0.0, action[2] * tl])
        return np.concatenate([action[:3] * fl, action[3:] * tl])

    def step(self, raw_action) -> Transition:
        if not self.started:
            raise EpisodeError("reset the environment before stepping")
        if self.done:
            raise EpisodeError("episode already finished")
        raw = np.asarray(raw_action, dtype=float).reshape(-1)
        if raw.size != self.act_dim or not np.all(np.isfinite(raw)):
            raise DynamicsInputError(f"action must be {self.act_dim} finite numbers")
        sc = self.scenario
        action = np.clip(raw, -1.0, 1.0)
        u = self.scale(action)
        x_prev, obs_prev = self.x.copy(), self.observation()

        if self.mpc_shaping and self.steps % sc.mpc.replan_every == 0:
            self.replan()

        h = sc.control_period / sc.substeps
        x = self.x
        sp = self.slosh_params
        for _ in range(sc.substeps):
            x = rk4_array(x, u, self.dist, self.params, h)
            if sp is not None:
                accel = (u[:3] + self.dist[:3]) / self.params.dry_mass
                self.slosh_state, d = slosh_step(self.slosh_state, accel, x[RATE], sp, h)
                self.dist = np.concatenate([d.force, d.torque])
                if sc.planar:
                    self.dist[[2, 3, 4]] = 0.0
        if not np.all(np.isfinite(x)):
            raise IntegrationError("non-finite state during episode")
        self.x = x
        self.steps += 1
        t = self.time

        state = StateVector.from_array(x)
        slosh = None
        if sp is not None:
            slosh = slosh_force(self.slosh_state, sp)
            if sc.planar:
                slosh = type(slosh)(slosh.force * [1, 1, 0], slosh.torque * [0, 0, 1])
        w = sc.reward_weights
        task = reward_standalone(state, action, slosh, t, w, sc.goal_state)
        f_s = np.zeros(3) if slosh is None else slosh.force
        tau_s = np.zeros(3) if slosh is None else slosh.torque
        info = {
            "slosh_force": float(np.linalg.norm(f_s)),
            "slosh_torque": float(np.linalg.norm(tau_s)),
            "slosh_force_vec": f_s,
            "slosh_torque_vec": tau_s,
            "reference": None,
        }
        reward = task
        if self.mpc_shaping:
            ref = reference_lookup(self.plan, t)
            info["reference"] = ref.as_array()
            reward = task - tracking_penalty(state, ref, w, sc.planar)

        status = zone_and_keepout_check(state, sc)
        self.dwell = self.dwell + 1 if stabilization_check(state, sc.goal_state, sc.stabilization) else 0
        cause = None
        if status != OK:
            cause = status
        elif self.dwell >= sc.stabilization.dwell_steps:
            cause = SUCCESS
        elif self.steps >= sc.max_steps:
            cause = TIME_LIMIT
        self.done = cause is not None
        self.cause = cause
        return Transition(
            state=x_prev, obs=obs_prev, action=raw, control=u, reward=reward, task_reward=task,
            next_state=x.copy(), next_obs=self.observation(), done=self.done, cause=cause, info=info,
        )


def reset(scenario: ScenarioConfig, rng: np.random.Generator, mpc_shaping: bool = False) -> tuple[StateVector, DockingEnv]:
    env = DockingEnv(scenario, mpc_shaping)
    env.reset(rng)
    return env.state, env


def step(env: DockingEnv, raw_action) -> Transition:
    return env.step(raw_action)
