"""Spacecraft docking under fuel slosh: MPC planning, PPO/SAC agents and evaluation tools."""

__version__ = "0.1.0"

from .dynamics import ControlInput, Disturbance, SpacecraftParams, StateVector  # noqa: E402
from .env import DockingEnv, ScenarioConfig  # noqa: E402
from .mpc import HorizonConfig, TrajectoryPlan, plan_trajectory  # noqa: E402

__all__ = [
    "__version__", "ControlInput", "Disturbance", "SpacecraftParams", "StateVector",
    "DockingEnv", "ScenarioConfig", "HorizonConfig", "TrajectoryPlan", "plan_trajectory",
]
