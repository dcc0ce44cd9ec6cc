import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dockrl.errors import DynamicsInputError, ParameterError
from dockrl.slosh import SloshParams, SloshState, fill_to_params, slosh_force, slosh_step, sphere_fluid_mass


def run(params, accel, seconds, dt=0.05, state=None):
    s = state or SloshState()
    forces = []
    for _ in range(int(round(seconds / dt))):
        s, d = slosh_step(s, accel, np.zeros(3), params, dt)
        forces.append(d.force)
    return s, np.array(forces)


def test_quiescent_fuel_is_silent():
    s, d = slosh_step(SloshState(), np.zeros(3), np.zeros(3), SloshParams(), 0.1)
    assert np.array_equal(d.force, np.zeros(3)) and np.array_equal(d.torque, np.zeros(3))


def test_steady_state_force_equals_minus_m_a():
    p = SloshParams(fuel_mass=100.0)
    tau = 1.0 / (p.damping_ratio * p.natural_freq)
    s, f = run(p, [0.01, 0, 0], 20 * tau)
    np.testing.assert_allclose(s.displacement, [-0.01 / p.natural_freq**2, 0, 0], rtol=1e-3)
    np.testing.assert_allclose(f[-1], [-1.0, 0, 0], rtol=1e-3, atol=1e-9)


@given(st.floats(0.0, 1.0), st.floats(-1, 1), st.floats(-1, 1))
def test_empty_tank_has_no_disturbance(t, ax, ay):
    p = SloshParams(fuel_mass=0.0)
    s, d = slosh_step(SloshState([t, 0, 0], [0, t, 0]), [ax, ay, 0.3], np.zeros(3), p, 0.2)
    assert np.array_equal(d.force, np.zeros(3)) and np.array_equal(d.torque, np.zeros(3))


@settings(max_examples=25)
@given(st.floats(1.0, 300.0), st.floats(-0.05, 0.05))
def test_force_is_linear_in_mass(m, a):
    s1, f1 = run(SloshParams(fuel_mass=m), [a, 0.5 * a, -a], 5.0, dt=0.1)
    s2, f2 = run(SloshParams(fuel_mass=2 * m), [a, 0.5 * a, -a], 5.0, dt=0.1)
    np.testing.assert_allclose(f2, 2 * f1, rtol=1e-12, atol=1e-300)


def test_torque_vanishes_with_force():
    d = slosh_force(SloshState(), SloshParams())
    assert np.array_equal(d.torque, np.zeros(3))


@pytest.mark.parametrize("zeta", [0.01, 0.05, 0.2])
def test_free_decay_envelope(zeta):
    p = SloshParams(fuel_mass=100.0, damping_ratio=zeta)
    dt = 0.05
    kick, _ = run(p, [0.02, -0.01, 0.0], 2.0, dt=dt)
    horizon = 10.0 / (zeta * p.natural_freq)
    _, f = run(p, np.zeros(3), horizon, dt=dt, state=kick)
    mag = np.linalg.norm(f, axis=1)
    peak = mag.max()
    assert mag[-1] < 1e-3 * peak
    # successive peaks of the oscillation shrink
    period = int(round(2 * math.pi / p.natural_freq / dt))
    envelope = [mag[i:i + period].max() for i in range(0, len(mag) - period, period)]
    assert all(b < a for a, b in zip(envelope, envelope[1:]))


def test_sphere_mass():
    assert sphere_fluid_mass(1.0, 1.0, 900.0) == pytest.approx(900 * 4 / 3 * math.pi, rel=1e-15)
    assert sphere_fluid_mass(1.0, 1.0, 900.0) == pytest.approx(3769.9, abs=0.05)


def test_fill_rule():
    assert fill_to_params(0.0).fuel_mass == 0.0
    assert fill_to_params(0.5).fuel_mass == pytest.approx(0.5 * 0.5 * 900 * 4 / 3 * math.pi, rel=1e-15)
    assert fill_to_params(0.5).fuel_mass == pytest.approx(942.5, abs=0.05)
    assert fill_to_params(1.0).fuel_mass == pytest.approx(0.2 * 900 * 4 / 3 * math.pi, rel=1e-15)


@pytest.mark.parametrize("frac", [-0.1, 1.1])
def test_fill_out_of_range(frac):
    with pytest.raises(ParameterError):
        fill_to_params(frac)


def test_non_finite_excitation_rejected():
    with pytest.raises(DynamicsInputError):
        slosh_step(SloshState(), [np.inf, 0, 0], np.zeros(3), SloshParams(), 0.1)


@pytest.mark.parametrize("kw", [dict(fuel_mass=-1.0), dict(natural_freq=0.0), dict(damping_ratio=1.0),
                                dict(tank_radius=0.0)])
def test_invalid_params(kw):
    with pytest.raises(ParameterError):
        SloshParams(**kw)
