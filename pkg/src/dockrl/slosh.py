"""
Equivalent-mechanical fuel slosh model.

The first slosh mode is represented on each body axis by a mass on a
spring and damper attached to the tank. Driven by the tanker's body-frame
specific force ``a``, the deflection ``p`` obeys

    p'' = -2 zeta wn p' - wn^2 p - a

and the fuel pushes back on the structure with

    f_s   = m (wn^2 p + 2 zeta wn p')
    tau_s = (attach_offset + p) x f_s

Under a constant acceleration the deflection settles at -a / wn^2 and the
force at -m a, i.e. the fuel behaves as extra inertia once it stops moving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Disturbance
from .errors import DynamicsInputError, ParameterError

DEFAULT_NATURAL_FREQ = 0.5  # rad/s
DEFAULT_DAMPING = 0.05


@dataclass(frozen=True)
class SloshParams:
    fuel_mass: float = 150.0
    attach_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.3]))
    natural_freq: float = DEFAULT_NATURAL_FREQ
    damping_ratio: float = DEFAULT_DAMPING
    tank_radius: float = 1.0
    fluid_density: float = 900.0

    def __post_init__(self):
        offset = np.asarray(self.attach_offset, dtype=float).reshape(-1)
        if offset.shape != (3,) or not np.all(np.isfinite(offset)):
            raise ParameterError("attach_offset must be a finite 3-vector")
        object.__setattr__(self, "attach_offset", offset)
        if not self.fuel_mass >= 0:
            raise ParameterError("fuel_mass must be non-negative")
        if not self.natural_freq > 0:
            raise ParameterError("natural_freq must be positive")
        if not 0 <= self.damping_ratio < 1:
            raise ParameterError("damping_ratio must lie in [0, 1)")
        if not self.tank_radius > 0:
            raise ParameterError("tank_radius must be positive")


@dataclass(frozen=True)
class SloshState:
    displacement: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("displacement", "velocity"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise DynamicsInputError(f"slosh {name} must be a finite 3-vector")
            object.__setattr__(self, name, v)


def slosh_force(state: SloshState, params: SloshParams) -> Disturbance:
    """Reaction force and torque of the fuel on the tank for a given slosh state."""
    wn, zeta = params.natural_freq, params.damping_ratio
    f = params.fuel_mass * (wn * wn * state.displacement + 2.0 * zeta * wn * state.velocity)
    tau = np.cross(params.attach_offset + state.displacement, f)
    return Disturbance(f, tau)


def slosh_step(state: SloshState, body_accel, ang_vel, params: SloshParams,
               dt: float) -> tuple[SloshState, Disturbance]:
    """Advance the slosh oscillator one step and return the new disturbance.

    ``ang_vel`` is accepted for interface symmetry with the rigid-body state;
    the linear surrogate has no rotational coupling.
    """
    a = np.asarray(body_accel, dtype=float).reshape(-1)
    w = np.asarray(ang_vel, dtype=float).reshape(-1)
    if a.shape != (3,) or w.shape != (3,) or not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
        raise DynamicsInputError("slosh excitation must be finite 3-vectors")
    if not (dt > 0 and math.isfinite(dt)):
        raise DynamicsInputError(f"dt must be positive, got {dt!r}")
    wn, zeta = params.natural_freq, params.damping_ratio
    c1, c0 = 2.0 * zeta * wn, wn * wn

    def accel(p, v):
        return -c1 * v - c0 * p - a

    p, v = state.displacement, state.velocity
    k1p, k1v = v, accel(p, v)
    k2p, k2v = v + 0.5 * dt * k1v, accel(p + 0.5 * dt * k1p, v + 0.5 * dt * k1v)
    k3p, k3v = v + 0.5 * dt * k2v, accel(p + 0.5 * dt * k2p, v + 0.5 * dt * k2v)
    k4p, k4v = v + dt * k3v, accel(p + dt * k3p, v + dt * k3v)
    p_new = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    v_new = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    new_state = SloshState(p_new, v_new)
    return new_state, slosh_force(new_state, params)


def sphere_fluid_mass(fill_fraction: float, tank_radius: float, density: float) -> float:
    return fill_fraction * (4.0 / 3.0) * math.pi * tank_radius**3 * density


def fill_to_params(fill_fraction: float, tank_radius: float = 1.0, density: float = 900.0,
                   natural_freq: float = DEFAULT_NATURAL_FREQ, damping_ratio: float = DEFAULT_DAMPING,
                   attach_offset=(0.0, 0.0, 0.3)) -> SloshParams:
    """Slosh parameters for a spherical tank filled to ``fill_fraction``.

    Only part of the liquid takes part in the first mode; the participating
    share falls as the tank fills, clamped to [0.2, 0.8].
    """
    if not 0.0 <= fill_fraction <= 1.0:
        raise ParameterError(f"fill_fraction must be in [0, 1], got {fill_fraction!r}")
    participating = min(0.8, max(0.2, 1.0 - fill_fraction))
    return SloshParams(
        fuel_mass=participating * sphere_fluid_mass(fill_fraction, tank_radius, density),
        attach_offset=np.asarray(attach_offset, dtype=float),
        natural_freq=natural_freq,
        damping_ratio=damping_ratio,
        tank_radius=tank_radius,
        fluid_density=density,
    )
