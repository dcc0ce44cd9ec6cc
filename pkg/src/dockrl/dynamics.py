"""
Relative orbital and attitude dynamics of the tanker.

Translational motion follows the Clohessy-Wiltshire equations in the RSW
frame of the target; attitude follows rigid-body Euler equations with
scalar-last quaternion kinematics:

    x'' =  3 n^2 x + 2 n y' + F_x / M + d_x
    y'' = -2 n x'           + F_y / M + d_y
    z'' = -n^2 z            + F_z / M + d_z

    I w' = tau - w x (I w)
    q'   = 1/2 [q4 w - w x qv ; -w . qv]

State layout (13 entries): [r (3), v (3), q (4, scalar last), w (3)].
Control is a body-frame force/torque wrench; body forces are rotated into
RSW by the attitude quaternion before entering the CW equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DynamicsInputError,
    IntegrationError,
    NumericError,
    ParameterError,
)

MU_EARTH = 3.986004418e14  # m^3/s^2
R_EARTH = 6378137.0  # m, equatorial

STATE_DIM = 13
CONTROL_DIM = 6
QUAT_TOL = 1e-6

POS = slice(0, 3)
VEL = slice(3, 6)
QUAT = slice(6, 10)
RATE = slice(10, 13)


def mean_motion(altitude: float) -> float:
    """Circular-orbit mean motion [rad/s] at the given altitude [m]."""
    a = R_EARTH + altitude
    return math.sqrt(MU_EARTH / a**3)


def _vec(x, size: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise DynamicsInputError(f"{name} must have {size} entries, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise DynamicsInputError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class StateVector:
    """Relative position/velocity [m, m/s], attitude quaternion, body rate [rad/s]."""

    rel_pos: np.ndarray
    rel_vel: np.ndarray
    quat: np.ndarray
    ang_vel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rel_pos", _vec(self.rel_pos, 3, "rel_pos"))
        object.__setattr__(self, "rel_vel", _vec(self.rel_vel, 3, "rel_vel"))
        object.__setattr__(self, "quat", _vec(self.quat, 4, "quat"))
        object.__setattr__(self, "ang_vel", _vec(self.ang_vel, 3, "ang_vel"))

    @classmethod
    def from_array(cls, x) -> "StateVector":
        x = _vec(x, STATE_DIM, "state")
        return cls(x[POS], x[VEL], x[QUAT], x[RATE])

    @classmethod
    def at_rest(cls, rel_pos=(0.0, 0.0, 0.0), quat=(0.0, 0.0, 0.0, 1.0)) -> "StateVector":
        return cls(rel_pos, np.zeros(3), quat, np.zeros(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rel_pos, self.rel_vel, self.quat, self.ang_vel])


@dataclass(frozen=True)
class ControlInput:
    """Body-frame force [N] and torque [N*m]."""

    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "force", _vec(self.force, 3, "force"))
        object.__setattr__(self, "torque", _vec(self.torque, 3, "torque"))

    @classmethod
    def zero(cls) -> "ControlInput":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        u = _vec(u, CONTROL_DIM, "control")
        return cls(u[:3], u[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    def within(self, force_limit: float, torque_limit: float, tol: float = 0.0) -> bool:
        return bool(
            np.all(np.abs(self.force) <= force_limit + tol)
            and np.all(np.abs(self.torque) <= torque_limit + tol)
        )


@dataclass(frozen=True)
class Disturbance:
    """Slosh force [N] and torque [N*m], both in the body frame."""

    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "force", _vec(self.force, 3, "disturbance force"))
        object.__setattr__(self, "torque", _vec(self.torque, 3, "disturbance torque"))

    @classmethod
    def zero(cls) -> "Disturbance":
        return cls()


@dataclass(frozen=True)
class SpacecraftParams:
    """Tanker physical characteristics.

    Attributes:
        dry_mass: structural mass M [kg].
        inertia: 3x3 symmetric positive-definite inertia [kg*m^2].
        orbital_rate: target mean motion n [rad/s].
        force_limit: per-axis body force bound [N].
        torque_limit: per-axis body torque bound [N*m].
        tank_radius: fuel position/tank size constant [m]; carried for
            configuration completeness, not used by the equations of motion.
    """

    dry_mass: float = 250.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([100.0, 100.0, 150.0]))
    orbital_rate: float = field(default_factory=lambda: mean_motion(600e3))
    force_limit: float = 10.0
    torque_limit: float = 2.0
    tank_radius: float = 1.0

    def __post_init__(self):
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape != (3, 3) or not np.all(np.isfinite(inertia)):
            raise ParameterError("inertia must be a finite 3x3 matrix")
        if not np.allclose(inertia, inertia.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(inertia).max())):
            raise ParameterError("inertia must be symmetric")
        if np.linalg.eigvalsh(inertia).min() <= 0.0:
            raise ParameterError("inertia must be positive definite")
        if not self.dry_mass > 0:
            raise ParameterError("dry_mass must be positive")
        if not self.orbital_rate > 0:
            raise ParameterError("orbital_rate must be positive")
        if not (self.force_limit > 0 and self.torque_limit > 0):
            raise ParameterError("force/torque limits must be positive")
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "_inertia_inv", np.linalg.inv(inertia))
        # row tuples for the scalar fast path
        object.__setattr__(self, "_I_rows", tuple(tuple(r) for r in inertia.tolist()))
        object.__setattr__(self, "_Iinv_rows", tuple(tuple(r) for r in self._inertia_inv.tolist()))

    @property
    def inertia_inv(self) -> np.ndarray:
        return self._inertia_inv

    @property
    def control_limits(self) -> np.ndarray:
        return np.array([self.force_limit] * 3 + [self.torque_limit] * 3)


@dataclass(frozen=True)
class LinearModel:
    """s' = A s + B u + d (continuous) or s+ = A s + B u + d (discrete, step > 0)."""

    a_mat: np.ndarray
    b_mat: np.ndarray
    offset: np.ndarray
    step: float | None = None

    def __post_init__(self):
        a = np.asarray(self.a_mat, dtype=float)
        b = np.asarray(self.b_mat, dtype=float)
        d = np.asarray(self.offset, dtype=float).reshape(-1)
        n = a.shape[0]
        if a.shape != (n, n) or b.ndim != 2 or b.shape[0] != n or d.shape != (n,):
            raise ParameterError(
                f"inconsistent linear model shapes A{a.shape} B{b.shape} d{d.shape}"
            )
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_mat", b)
        object.__setattr__(self, "offset", d)

    @property
    def discrete(self) -> bool:
        return self.step is not None

    @property
    def n_states(self) -> int:
        return self.a_mat.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.b_mat.shape[1]


# ---------------------------------------------------------------------------
# quaternion helpers (scalar last)
# ---------------------------------------------------------------------------

def _check_unit(quat: np.ndarray) -> None:
    if abs(np.linalg.norm(quat) - 1.0) > QUAT_TOL:
        raise DynamicsInputError(f"quaternion not unit norm (|q| = {np.linalg.norm(quat):.9f})")


def body_to_rsw(quat) -> np.ndarray:
    """Rotation matrix taking body-frame vectors into the RSW frame."""
    q = _vec(quat, 4, "quat")
    _check_unit(q)
    q = q / np.linalg.norm(q)
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_multiply(p, q) -> np.ndarray:
    """Hamilton product p (x) q, scalar last."""
    px, py, pz, pw = p
    qx, qy, qz, qw = q
    return np.array([
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
        pw * qw - px * qx - py * qy - pz * qz,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([axis * math.sin(angle / 2.0), [math.cos(angle / 2.0)]])


def attitude_error_quat(quat, goal_quat) -> np.ndarray:
    """Error rotation goal^-1 (x) q, sign fixed so the scalar part is >= 0."""
    err = quat_multiply(quat_conjugate(goal_quat), quat)
    return err if err[3] >= 0 else -err


def attitude_error_angle(quat, goal_quat) -> float:
    """Geodesic angle [rad] between two attitudes, in [0, pi]."""
    c = abs(float(np.dot(quat, goal_quat))) / (np.linalg.norm(quat) * np.linalg.norm(goal_quat))
    return 2.0 * math.acos(min(1.0, c))


def attitude_error_vector(quat, goal_quat) -> np.ndarray:
    """Small-angle rotation vector (2 x vector part of the error quaternion)."""
    return 2.0 * attitude_error_quat(quat, goal_quat)[:3]


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed unit quaternion (scalar last, q4 >= 0)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return q if q[3] >= 0 else -q


# ---------------------------------------------------------------------------
# equations of motion
# ---------------------------------------------------------------------------

def cw_acceleration(state: StateVector, force_rsw, params: SpacecraftParams, dist_accel) -> np.ndarray:
    """Clohessy-Wiltshire relative acceleration [m/s^2] in RSW."""
    f = _vec(force_rsw, 3, "force_rsw")
    d = _vec(dist_accel, 3, "dist_accel")
    x, _, z = state.rel_pos
    vx, vy, _ = state.rel_vel
    n = params.orbital_rate
    m = params.dry_mass
    return np.array([
        3.0 * n * n * x + 2.0 * n * vy + f[0] / m + d[0],
        -2.0 * n * vx + f[1] / m + d[1],
        -n * n * z + f[2] / m + d[2],
    ])


def attitude_derivative(quat, ang_vel, torque_total, params: SpacecraftParams) -> tuple[np.ndarray, np.ndarray]:
    """Quaternion rate and angular acceleration.

    Uses I w' = tau - w x (I w); the quaternion is body-to-RSW, scalar last.
    """
    q = _vec(quat, 4, "quat")
    w = _vec(ang_vel, 3, "ang_vel")
    tau = _vec(torque_total, 3, "torque")
    _check_unit(q)
    qv, q4 = q[:3], q[3]
    quat_dot = 0.5 * np.concatenate([q4 * w - np.cross(w, qv), [-w @ qv]])
    try:
        ang_acc = np.linalg.solve(params.inertia, tau - np.cross(w, params.inertia @ w))
    except np.linalg.LinAlgError as exc:
        raise ParameterError("singular inertia matrix") from exc
    return quat_dot, ang_acc


def _derivative(x: np.ndarray, u: np.ndarray, dist: np.ndarray, params: SpacecraftParams) -> np.ndarray:
    """Scalar fast path of the full 13-state derivative.

    ``u`` and ``dist`` are 6-vectors [force, torque] in the body frame. No
    validation and no unit-norm assumption beyond what the formulas need,
    so the routine is also used for finite-difference Jacobians.
    """
    rx, ry, rz, vx, vy, vz, qx, qy, qz, qw, wx, wy, wz = x.tolist()
    fx, fy, fz, tx, ty, tz = u.tolist()
    sx, sy, sz, stx, sty, stz = dist.tolist()
    m = params.dry_mass
    n = params.orbital_rate

    # total body force (control + slosh) rotated into RSW; the slosh term
    # enters the CW equations as C_B^R f_s / M
    bx, by, bz = fx + sx, fy + sy, fz + sz
    s = qx * qx + qy * qy + qz * qz + qw * qw
    k = 2.0 / s
    Fx = (1 - k * (qy * qy + qz * qz)) * bx + k * (qx * qy - qz * qw) * by + k * (qx * qz + qy * qw) * bz
    Fy = k * (qx * qy + qz * qw) * bx + (1 - k * (qx * qx + qz * qz)) * by + k * (qy * qz - qx * qw) * bz
    Fz = k * (qx * qz - qy * qw) * bx + k * (qy * qz + qx * qw) * by + (1 - k * (qx * qx + qy * qy)) * bz

    ax = 3.0 * n * n * rx + 2.0 * n * vy + Fx / m
    ay = -2.0 * n * vx + Fy / m
    az = -n * n * rz + Fz / m

    # q' = 1/2 [qw w - w x qv ; -w . qv]
    dqx = 0.5 * (qw * wx - (wy * qz - wz * qy))
    dqy = 0.5 * (qw * wy - (wz * qx - wx * qz))
    dqz = 0.5 * (qw * wz - (wx * qy - wy * qx))
    dqw = -0.5 * (wx * qx + wy * qy + wz * qz)

    (i00, i01, i02), (i10, i11, i12), (i20, i21, i22) = params._I_rows
    hx = i00 * wx + i01 * wy + i02 * wz
    hy = i10 * wx + i11 * wy + i12 * wz
    hz = i20 * wx + i21 * wy + i22 * wz
    mx = tx + stx - (wy * hz - wz * hy)
    my = ty + sty - (wz * hx - wx * hz)
    mz = tz + stz - (wx * hy - wy * hx)
    (j00, j01, j02), (j10, j11, j12), (j20, j21, j22) = params._Iinv_rows

    return np.array([
        vx, vy, vz, ax, ay, az, dqx, dqy, dqz, dqw,
        j00 * mx + j01 * my + j02 * mz,
        j10 * mx + j11 * my + j12 * mz,
        j20 * mx + j21 * my + j22 * mz,
    ])


def state_derivative(state: StateVector, control: ControlInput, dist: Disturbance, params: SpacecraftParams) -> np.ndarray:
    """Full 13-entry state derivative with control and slosh disturbance."""
    _check_unit(state.quat)
    return _derivative(
        state.as_array(),
        control.as_array(),
        np.concatenate([dist.force, dist.torque]),
        params,
    )


def rk4_array(x: np.ndarray, u: np.ndarray, dist: np.ndarray, params: SpacecraftParams, dt: float) -> np.ndarray:
    """One RK4 step on the raw 13-array, inputs held constant, quaternion renormalized."""
    k1 = _derivative(x, u, dist, params)
    k2 = _derivative(x + (0.5 * dt) * k1, u, dist, params)
    k3 = _derivative(x + (0.5 * dt) * k2, u, dist, params)
    k4 = _derivative(x + dt * k3, u, dist, params)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[QUAT] /= math.sqrt(out[6] ** 2 + out[7] ** 2 + out[8] ** 2 + out[9] ** 2)
    return out


def integrate_step(state: StateVector, control: ControlInput, dist: Disturbance,
                   params: SpacecraftParams, dt: float) -> StateVector:
    """Advance the state by ``dt`` seconds with zero-order-hold inputs."""
    if not (dt > 0 and math.isfinite(dt)):
        raise IntegrationError(f"step must be positive and finite, got {dt!r}")
    _check_unit(state.quat)
    out = rk4_array(
        state.as_array(), control.as_array(),
        np.concatenate([dist.force, dist.torque]), params, dt,
    )
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state after integration step")
    return StateVector.from_array(out)


# ---------------------------------------------------------------------------
# linearization and discretization
# ---------------------------------------------------------------------------

def linearize(state: StateVector, control: ControlInput, params: SpacecraftParams,
              rel_step: float = 1e-6) -> LinearModel:
    """Jacobians of the undisturbed dynamics by central differences.

    The offset is chosen so the affine model is exact at the operating point:
    d = f(s, u) - A s - B u.
    """
    x0 = state.as_array()
    u0 = control.as_array()
    zero = np.zeros(6)
    f0 = _derivative(x0, u0, zero, params)

    a_mat = np.empty((STATE_DIM, STATE_DIM))
    for i in range(STATE_DIM):
        h = rel_step * max(1.0, abs(x0[i]))
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        a_mat[:, i] = (_derivative(xp, u0, zero, params) - _derivative(xm, u0, zero, params)) / (xp[i] - xm[i])

    b_mat = np.empty((STATE_DIM, CONTROL_DIM))
    for j in range(CONTROL_DIM):
        h = rel_step * max(1.0, abs(u0[j]))
        up, um = u0.copy(), u0.copy()
        up[j] += h
        um[j] -= h
        b_mat[:, j] = (_derivative(x0, up, zero, params) - _derivative(x0, um, zero, params)) / (up[j] - um[j])

    offset = f0 - a_mat @ x0 - b_mat @ u0
    return LinearModel(a_mat, b_mat, offset)


def cw_system_matrix(n: float) -> np.ndarray:
    """Analytic 6x6 CW matrix for [r, v]."""
    a = np.zeros((6, 6))
    a[0:3, 3:6] = np.eye(3)
    a[3, 0] = 3.0 * n * n
    a[3, 4] = 2.0 * n
    a[4, 3] = -2.0 * n
    a[5, 2] = -n * n
    return a


def expm_taylor(mat: np.ndarray, tol: float = 1e-12, max_terms: int = 60) -> np.ndarray:
    """Matrix exponential by scaling and squaring of a truncated Taylor series."""
    mat = np.asarray(mat, dtype=float)
    norm = np.abs(mat).sum(axis=1).max() if mat.size else 0.0
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    scaled = mat / (2.0 ** squarings)
    # squaring amplifies the truncation error roughly by 2**squarings
    term_tol = tol * 2.0 ** -squarings
    result = np.eye(mat.shape[0])
    term = np.eye(mat.shape[0])
    for k in range(1, max_terms + 1):
        term = term @ scaled / k
        result = result + term
        if np.abs(term).max() <= term_tol * max(1.0, np.abs(result).max()):
            break
    else:
        raise NumericError("Taylor series for the matrix exponential did not converge")
    for _ in range(squarings):
        result = result @ result
    return result


def discretize(model: LinearModel, dt: float) -> LinearModel:
    """Zero-order-hold discretization of a continuous affine model.

    Uses the augmented exponential exp([[A, B, d], [0, 0, 0]] dt), whose top
    block row is [A_d, B_d, d_d].
    """
    if model.discrete:
        raise ParameterError("model is already discrete")
    if not (dt > 0 and math.isfinite(dt)):
        raise ParameterError(f"dt must be positive, got {dt!r}")
    n, m = model.n_states, model.n_inputs
    aug = np.zeros((n + m + 1, n + m + 1))
    aug[:n, :n] = model.a_mat
    aug[:n, n:n + m] = model.b_mat
    aug[:n, n + m] = model.offset
    phi = expm_taylor(aug * dt)
    return LinearModel(phi[:n, :n], phi[:n, n:n + m], phi[:n, n + m], step=float(dt))
