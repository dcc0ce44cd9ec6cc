"""
Scenario files.

A scenario is a YAML document whose sections mirror the scenario types
(spacecraft, slosh, stabilization, reward, mpc) plus a ``training``
section with algorithm settings and budget profiles. Bundled presets are
addressed by name; anything else is treated as a path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .dynamics import SpacecraftParams, StateVector, mean_motion
from .env import (
    DOCKING, PLANAR, MpcSettings, RewardWeights, ScenarioConfig, StabilizationCriteria,
)
from .errors import ConfigError, DockError
from .ppo import PpoConfig
from .sac import SacConfig
from .slosh import SloshParams

PRESETS = ("planar_lab", "leo_docking")


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_scenario_dict(source: str | Path) -> dict:
    """Raw mapping for a preset name or a YAML file path."""
    name = str(source)
    if name in PRESETS:
        text = resources.files("dockrl.presets").joinpath(f"{name}.yaml").read_text()
    else:
        path = Path(name)
        if not path.is_file():
            raise ConfigError(f"scenario {name!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
        text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse scenario {name!r}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"scenario {name!r} must be a mapping")
    return data


def _matrix(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.size == n:
        return np.diag(arr)
    if arr.shape == (n, n):
        return arr
    raise ConfigError(f"{name} needs {n} diagonal entries or an {n}x{n} matrix")


def _group_weight(groups: dict, planar: bool) -> np.ndarray:
    g = {k: float(groups.get(k, 0.0)) for k in ("position", "velocity", "attitude", "rate")}
    if planar:
        diag = [g["position"]] * 2 + [g["velocity"]] * 2 + [g["attitude"], g["rate"]]
    else:
        diag = [g["position"]] * 3 + [g["velocity"]] * 3 + [g["attitude"]] * 3 + [g["rate"]] * 3
    return np.diag(diag)


def build_scenario(data: dict) -> ScenarioConfig:
    """Turn a scenario mapping into a validated ScenarioConfig."""
    try:
        mode = data["mode"]
        planar = mode == PLANAR
        if mode not in (PLANAR, DOCKING):
            raise ConfigError(f"unknown mode {mode!r}")
        episode_limit = float(data["episode_limit"])

        sc = dict(data.get("spacecraft", {}))
        if "orbital_rate" in sc:
            rate = float(sc.pop("orbital_rate"))
        else:
            rate = mean_motion(float(sc.pop("orbital_altitude", 600e3)))
        inertia = np.asarray(sc.pop("inertia", [100.0, 100.0, 150.0]), dtype=float)
        spacecraft = SpacecraftParams(
            inertia=np.diag(inertia) if inertia.ndim == 1 else inertia,
            orbital_rate=rate,
            **{k: float(v) for k, v in sc.items()},
        )

        slosh = None
        fuel_range = fill = None
        if data.get("slosh") is not None:
            s = dict(data["slosh"])
            fuel_range = s.pop("fuel_mass_range", None)
            fill = s.pop("fill_fraction", None)
            if s.pop("enabled", True):
                slosh = SloshParams(**{k: (np.asarray(v, dtype=float) if k == "attach_offset" else float(v))
                                       for k, v in s.items()})
            else:
                fuel_range = fill = None

        rw = dict(data.get("reward", {}))
        n_act = 3 if planar else 6
        k1 = rw.get("k1")
        weights = RewardWeights(
            control_weight=_matrix(rw.get("control_weight", [10.0] * n_act), n_act, "control_weight"),
            state_error_weight=_group_weight(rw.get("state_error_weight", {}), planar),
            rot_bonus=float(rw.get("rot_bonus", 100.0)),
            pos_bonus=float(rw.get("pos_bonus", 10.0)),
            slosh_force_weight=float(rw.get("slosh_force_weight", 5.0)),
            slosh_torque_weight=float(rw.get("slosh_torque_weight", 10.0)),
            k0=float(rw.get("k0", 1.0)),
            k1=9.0 / episode_limit if k1 is None else float(k1),
        )

        mpc = dict(data.get("mpc", {}))
        mw = mpc.pop("weights", {})
        mpc_settings = MpcSettings(
            weights=(mw.get("position", 1.0), mw.get("velocity", 10.0), mw.get("attitude", 5.0), mw.get("rate", 50.0)),
            **mpc,
        )

        goal = data.get("goal", {})
        goal_state = StateVector.at_rest(goal.get("position", [0.0, 0.0, 0.0]), goal.get("quaternion", [0.0, 0.0, 0.0, 1.0]))
        zone = data["zone"]
        start = data.get("start") or {}
        return ScenarioConfig(
            name=str(data.get("name", "custom")),
            mode=mode,
            control_period=float(data["control_period"]),
            episode_limit=episode_limit,
            zone_lower=np.asarray(zone["lower"], dtype=float),
            zone_upper=np.asarray(zone["upper"], dtype=float),
            keep_out_radius=float(data.get("keep_out_radius", 0.0)),
            stabilization=StabilizationCriteria(**data.get("stabilization", {})),
            spacecraft=spacecraft,
            reward_weights=weights,
            goal_state=goal_state,
            slosh=slosh,
            fuel_mass_range=None if fuel_range is None else tuple(float(v) for v in fuel_range),
            fill_fraction=None if fill is None else float(fill),
            start_lower=start.get("lower"),
            start_upper=start.get("upper"),
            randomize_attitude=bool(data.get("randomize_attitude", True)),
            substeps=int(data.get("substeps", 10)),
            mpc=mpc_settings,
        )
    except DockError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario definition: {exc!r}") from exc


def training_settings(data: dict, algo: str, budget: str = "desk") -> tuple[PpoConfig | SacConfig, dict]:
    """Algorithm config and the chosen budget profile from the ``training`` section."""
    training = data.get("training", {})
    if algo not in ("ppo", "sac"):
        raise ConfigError(f"unknown algorithm {algo!r}")
    budgets = training.get("budgets", {})
    if budget not in budgets:
        raise ConfigError(f"budget {budget!r} not defined; choose from {sorted(budgets)}")
    profile = dict(budgets[budget])
    algo_kwargs = dict(training.get(algo, {}))
    algo_kwargs.update(profile.pop(algo, {}))
    try:
        cfg = PpoConfig(**algo_kwargs) if algo == "ppo" else SacConfig(**algo_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {algo} settings: {exc}") from exc
    return cfg, profile


def load_scenario(source: str | Path, overrides: dict | None = None) -> tuple[ScenarioConfig, dict]:
    """Scenario plus the merged raw mapping it was built from."""
    data = read_scenario_dict(source)
    if overrides:
        data = _deep_merge(data, overrides)
    return build_scenario(data), data


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def config_hash(*parts: Any) -> str:
    """Short stable digest of JSON-serializable configuration parts."""
    blob = json.dumps(_jsonable(list(parts)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
