"""
Finite-horizon MPC trajectory planner.

The continuous dynamics are linearized about the current state, discretized
with a zero-order hold, and the state sequence is eliminated (condensing) so
the decision vector is the stacked control sequence U = [u_0 ... u_{N-1}]:

    s_k = P_k + G_k U,     k = 1..N
    J(U) = sum_k |s_k - s_f|^2_Omega + |s_N - s_f|^2_Term + sum_k |u_k|^2_K

Input limits stay simple boxes after condensing, so the QP is solved by
accelerated projected gradient. State limits and the keep-out sphere become
quadratic penalties on the rows that the current solution violates; the
solve is repeated until no new rows are violated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    POS,
    QUAT,
    ControlInput,
    LinearModel,
    SpacecraftParams,
    StateVector,
    discretize,
    linearize,
)
from .errors import ParameterError, SolverError

CONVERGED = "converged"
MAX_ITER = "max-iterations"


def _check_psd(mat: np.ndarray, name: str, strict: bool = False) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1] or not np.all(np.isfinite(mat)):
        raise ParameterError(f"{name} must be a finite square matrix")
    scale = max(1.0, np.abs(mat).max())
    if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-12 * scale):
        raise ParameterError(f"{name} must be symmetric")
    eig_min = np.linalg.eigvalsh(mat).min()
    if eig_min < -1e-10 * scale or (strict and eig_min <= 0.0):
        raise ParameterError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
    return mat


@dataclass(frozen=True)
class HorizonConfig:
    steps: int
    dt: float
    state_weight: np.ndarray
    input_weight: np.ndarray
    terminal_weight: np.ndarray | None = None

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ParameterError("horizon needs at least one step")
        if not self.dt > 0:
            raise ParameterError("horizon dt must be positive")
        object.__setattr__(self, "steps", int(self.steps))
        sw = _check_psd(self.state_weight, "state_weight")
        iw = _check_psd(self.input_weight, "input_weight")
        tw = np.zeros_like(sw) if self.terminal_weight is None else _check_psd(self.terminal_weight, "terminal_weight")
        if tw.shape != sw.shape:
            raise ParameterError("terminal_weight must match state_weight")
        object.__setattr__(self, "state_weight", sw)
        object.__setattr__(self, "input_weight", iw)
        object.__setattr__(self, "terminal_weight", tw)


@dataclass(frozen=True)
class ConstraintSet:
    """Box limits on states and inputs plus a keep-out sphere around a point."""

    state_lower: np.ndarray
    state_upper: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray
    keep_out_radius: float = 0.0
    keep_out_center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("state_lower", "state_upper", "input_lower", "input_upper", "keep_out_center"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if self.state_lower.shape != self.state_upper.shape or self.input_lower.shape != self.input_upper.shape:
            raise ParameterError("bound vectors must pair up in shape")
        if np.any(self.state_lower > self.state_upper) or np.any(self.input_lower > self.input_upper):
            raise ParameterError("lower bounds must not exceed upper bounds")
        if not np.all(np.isfinite(self.input_lower)) or not np.all(np.isfinite(self.input_upper)):
            raise ParameterError("input bounds must be finite")
        if not self.keep_out_radius >= 0:
            raise ParameterError("keep_out_radius must be non-negative")

    @classmethod
    def for_spacecraft(cls, params: SpacecraftParams, state_lower=None, state_upper=None,
                       keep_out_radius: float = 0.0, planar: bool = False) -> "ConstraintSet":
        n = 13
        lo = np.full(n, -np.inf) if state_lower is None else state_lower
        hi = np.full(n, np.inf) if state_upper is None else state_upper
        limits = params.control_limits.copy()
        if planar:
            # only in-plane force and yaw torque
            limits[[2, 3, 4]] = 0.0
        return cls(lo, hi, -limits, limits, keep_out_radius)


@dataclass
class QuadraticProgram:
    """min 1/2 x'Hx + g'x + c  subject to lower <= x <= upper.

    ``free_response`` and ``input_map`` carry the condensed prediction
    s_{1..N} = free_response + input_map @ x when built from a linear model.
    """

    hessian: np.ndarray
    gradient: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    constant: float = 0.0
    free_response: np.ndarray | None = None
    input_map: np.ndarray | None = None

    def __post_init__(self):
        self.hessian = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        self.gradient = np.asarray(self.gradient, dtype=float).reshape(-1)
        k = self.gradient.size
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (k,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (k,)).copy()
        if self.hessian.shape != (k, k):
            raise SolverError(f"hessian shape {self.hessian.shape} does not match gradient size {k}")
        if np.any(self.lower > self.upper):
            raise SolverError("infeasible box: lower > upper")

    @property
    def size(self) -> int:
        return self.gradient.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.hessian @ x) + self.gradient @ x + self.constant)


@dataclass
class QpResult:
    x: np.ndarray
    status: str
    iterations: int
    kkt_residual: float
    objective: float
    history: list[float]

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def kkt_residual(qp: QuadraticProgram, x: np.ndarray, step: float = 1.0) -> float:
    """Projected-gradient (natural) residual |x - P(x - step * grad)|_inf."""
    grad = qp.hessian @ x + qp.gradient
    return float(np.max(np.abs(x - np.clip(x - step * grad, qp.lower, qp.upper)), initial=0.0))


def _polish(qp: QuadraticProgram, x: np.ndarray, grad: np.ndarray, f: float) -> tuple[np.ndarray, float] | None:
    """Projected Newton step on the variables not held at a bound by the gradient.

    Backtracks along the projected path until the objective drops; returns
    None when no decrease is found.
    """
    # epsilon-active set: near a bound with the gradient pushing outward
    eps = min(1e-3, float(np.max(np.abs(x - np.clip(x - grad, qp.lower, qp.upper)), initial=0.0)))
    at_lo = (x <= qp.lower + eps) & (grad > 0)
    at_hi = (x >= qp.upper - eps) & (grad < 0)
    free = ~(at_lo | at_hi)
    if not free.any():
        return None
    x = x.copy()
    x[at_lo] = qp.lower[at_lo]
    x[at_hi] = qp.upper[at_hi]
    h_ff = qp.hessian[np.ix_(free, free)]
    rhs = -(qp.gradient[free] + qp.hessian[np.ix_(free, ~free)] @ x[~free])
    try:
        z = np.linalg.solve(h_ff, rhs)
    except np.linalg.LinAlgError:
        z = np.linalg.lstsq(h_ff, rhs, rcond=None)[0]
    step = np.zeros_like(x)
    step[free] = z - x[free]
    alpha = 1.0
    for _ in range(40):
        cand = np.clip(x + alpha * step, qp.lower, qp.upper)
        f_cand = qp.objective(cand)
        if f_cand < f:
            return cand, f_cand
        alpha *= 0.5
    return None


def _subspace_solve(h_ff: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(h_ff, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(h_ff, rhs, rcond=None)[0]


def _active_set_refine(qp: QuadraticProgram, x: np.ndarray, max_steps: int) -> tuple[np.ndarray, float]:
    """Primal active-set iterations started from a feasible point.

    Each pass minimizes over the free variables with the working set held at
    its bounds, moves toward that minimizer up to the first blocking bound,
    and releases the bound with the most negative multiplier once the
    subspace minimum is reached. The objective never increases, and the
    subspace solves are exact, so ill-conditioning that stalls first-order
    steps does not matter here.
    """
    h, c, lo, hi = qp.hessian, qp.gradient, qp.lower, qp.upper
    x = np.clip(x, lo, hi)
    grad = h @ x + c
    w_lo = (x <= lo) & (grad >= 0)
    w_hi = (x >= hi) & (grad <= 0) & ~w_lo
    mult_tol = 1e-12 * max(1.0, float(np.abs(grad).max(initial=0.0)))
    for _ in range(max_steps):
        free = ~(w_lo | w_hi)
        if free.any():
            fixed = ~free
            rhs = -(c[free] + h[np.ix_(free, fixed)] @ x[fixed])
            d = _subspace_solve(h[np.ix_(free, free)], rhs) - x[free]
            xf = x[free]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                ratio = np.where(d < 0, (lo[free] - xf) / d, np.where(d > 0, (hi[free] - xf) / d, np.inf))
            j = int(np.argmin(ratio)) if ratio.size else -1
            alpha = min(1.0, float(ratio[j])) if j >= 0 else 1.0
            x = x.copy()
            x[free] = xf + max(alpha, 0.0) * d
            if alpha < 1.0:
                idx = np.flatnonzero(free)[j]
                if d[j] < 0:
                    x[idx] = lo[idx]
                    w_lo[idx] = True
                else:
                    x[idx] = hi[idx]
                    w_hi[idx] = True
                continue
        grad = h @ x + c
        # optimality at a bound: gradient points out of the box
        viol = np.where(w_lo, -grad, 0.0) + np.where(w_hi, grad, 0.0)
        k = int(np.argmax(viol))
        if viol[k] <= mult_tol:
            break
        w_lo[k] = w_hi[k] = False
    return x, qp.objective(x)


def solve_qp(qp: QuadraticProgram, tol: float = 1e-8, max_iter: int = 5000,
             x0: np.ndarray | None = None, polish_every: int = 2, refine_every: int = 50) -> QpResult:
    """Box-constrained convex QP by accelerated projected gradient with restart.

    Momentum is dropped whenever a step would raise the objective, so the
    iterates descend monotonically. Every ``polish_every`` iterations a Newton
    step on the current free set is tried and kept only if it lowers the
    objective; this pins down the exact optimum once the active set is found.
    Every ``refine_every`` iterations an exact active-set pass runs from the
    current iterate, which rescues badly conditioned problems.

    Convergence is declared when the projected-gradient residual, taken with
    step 1/max(1, L) (L the largest Hessian eigenvalue), is at most ``tol``.
    """
    h = qp.hessian
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(qp.gradient))):
        raise SolverError("QP data must be finite")
    scale = max(1.0, np.abs(h).max())
    if not np.allclose(h, h.T, rtol=0.0, atol=1e-10 * scale):
        raise SolverError("hessian is not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (h + h.T)) if qp.size else np.zeros(0)
    if eig.size and eig.min() < -1e-10 * scale:
        raise SolverError(f"hessian is not positive semidefinite (min eigenvalue {eig.min():.3e})")
    lipschitz = max(float(eig.max(initial=0.0)), 1e-12)
    res_step = 1.0 / max(1.0, lipschitz)

    x = np.zeros(qp.size) if x0 is None else np.asarray(x0, dtype=float).copy()
    x = np.clip(x, qp.lower, qp.upper)
    f = qp.objective(x)
    grad = h @ x + qp.gradient
    history = [f]
    y, t = x.copy(), 1.0
    status, it = MAX_ITER, 0

    for it in range(max_iter + 1):
        if kkt_residual(qp, x, res_step) <= tol:
            status = CONVERGED
            break
        if it == max_iter:
            break
        x_new = np.clip(y - (h @ y + qp.gradient) / lipschitz, qp.lower, qp.upper)
        f_new = qp.objective(x_new)
        if f_new > f:
            # restart from a plain projected-gradient step
            t = 1.0
            x_new = np.clip(x - grad / lipschitz, qp.lower, qp.upper)
            f_new = qp.objective(x_new)
            if f_new > f:
                x_new, f_new = x, f
            y = x_new.copy()
        else:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_next) * (x_new - x)
            t = t_next
        x, f = x_new, f_new
        grad = h @ x + qp.gradient

        if polish_every and it % polish_every == polish_every - 1:
            polished = _polish(qp, x, grad, f)
            if polished is not None:
                x, f = polished
                grad = h @ x + qp.gradient
                y, t = x.copy(), 1.0
        if refine_every and it % refine_every == refine_every - 1:
            x_ref, f_ref = _active_set_refine(qp, x, 3 * qp.size + 10)
            if f_ref <= f:
                x, f = x_ref, f_ref
                grad = h @ x + qp.gradient
                y, t = x.copy(), 1.0
        history.append(f)

    return QpResult(x, status, it, kkt_residual(qp, x, res_step), f, history)


# ---------------------------------------------------------------------------
# condensing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SoftRow:
    """Penalized linear inequality  a . s_k <= b  on predicted step k (1..N)."""

    step: int
    coeffs: np.ndarray
    bound: float


def _as_array(s) -> np.ndarray:
    return s.as_array() if isinstance(s, StateVector) else np.asarray(s, dtype=float).reshape(-1)


def build_qp(initial, goal, model: LinearModel, horizon: HorizonConfig,
             constraints: ConstraintSet, soft_rows: list[SoftRow] | tuple = (),
             soft_weight: float | None = None) -> QuadraticProgram:
    """Condensed QP over the stacked control sequence."""
    if not model.discrete:
        raise ParameterError("build_qp needs a discrete model")
    if not math.isclose(model.step, horizon.dt, rel_tol=1e-12):
        raise ParameterError(f"model step {model.step} differs from horizon dt {horizon.dt}")
    s0, sf = _as_array(initial), _as_array(goal)
    n, m, big_n = model.n_states, model.n_inputs, horizon.steps
    if s0.shape != (n,) or sf.shape != (n,):
        raise ParameterError("initial/goal dimension does not match the model")
    if horizon.state_weight.shape != (n, n) or horizon.input_weight.shape != (m, m):
        raise ParameterError("weight dimensions do not match the model")
    if constraints.input_lower.shape != (m,):
        raise ParameterError("input bounds do not match the model")

    a, b, d = model.a_mat, model.b_mat, model.offset
    # free response P_k and input map G_k (rows for s_1..s_N)
    free = np.empty((big_n, n))
    gmap = np.zeros((big_n, n, big_n, m))
    s = s0
    for k in range(big_n):
        s = a @ s + d
        free[k] = s
        gmap[k, :, k, :] = b
        if k > 0:
            gmap[k, :, :k, :] = np.einsum("ij,jkl->ikl", a, gmap[k - 1, :, :k, :])
    gmat = gmap.reshape(big_n * n, big_n * m)

    omega = horizon.state_weight
    q_blocks = [omega] * big_n
    q_blocks[-1] = omega + horizon.terminal_weight
    err = (free - sf).reshape(-1)
    qg = np.empty_like(gmat)
    qe = np.empty_like(err)
    for k, qk in enumerate(q_blocks):
        rows = slice(k * n, (k + 1) * n)
        qg[rows] = qk @ gmat[rows]
        qe[rows] = qk @ err[rows]
    hess = 2.0 * (gmat.T @ qg + np.kron(np.eye(big_n), horizon.input_weight))
    grad = 2.0 * (gmat.T @ qe)
    const = float(err @ qe + (s0 - sf) @ omega @ (s0 - sf))

    if soft_rows:
        w = soft_weight if soft_weight is not None else 1e3 * max(1.0, float(np.abs(omega).max()))
        for row in soft_rows:
            k = row.step - 1
            ga = row.coeffs @ gmat[k * n:(k + 1) * n]
            resid = float(row.coeffs @ free[k] - row.bound)
            hess += 2.0 * w * np.outer(ga, ga)
            grad += 2.0 * w * resid * ga
            const += w * resid * resid
    hess = 0.5 * (hess + hess.T)

    return QuadraticProgram(
        hessian=hess,
        gradient=grad,
        lower=np.tile(constraints.input_lower, big_n),
        upper=np.tile(constraints.input_upper, big_n),
        constant=const,
        free_response=free.reshape(-1),
        input_map=gmat,
    )


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryPlan:
    """Planned states (N+1 x n) and controls (N x m) on a uniform grid."""

    states: np.ndarray
    controls: np.ndarray
    start_time: float
    dt: float
    status: str = CONVERGED
    cost: float = 0.0
    max_violation: float = 0.0
    solver_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise ParameterError("a plan needs exactly one more state than controls")

    @property
    def steps(self) -> int:
        return len(self.controls)

    @property
    def end_time(self) -> float:
        return self.start_time + self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(self.steps + 1)

    def state(self, k: int) -> StateVector:
        x = self.states[k].copy()
        x[QUAT] /= np.linalg.norm(x[QUAT])
        return StateVector.from_array(x)

    def control(self, k: int) -> ControlInput:
        return ControlInput.from_array(self.controls[k])

    def effort(self) -> float:
        """Sum of |force| dt over the plan [N s]."""
        return float(np.linalg.norm(self.controls[:, :3], axis=1).sum() * self.dt)


def _grid_index(plan: TrajectoryPlan, t: float) -> int:
    k = math.floor((t - plan.start_time) / plan.dt + 1e-9)
    return min(max(k, 0), plan.steps)


def reference_lookup(plan: TrajectoryPlan, t: float) -> StateVector:
    """Zero-order-hold planned state at time ``t``; clamps past the horizon."""
    if plan.steps < 0 or len(plan.states) == 0:
        raise ParameterError("empty plan")
    return plan.state(_grid_index(plan, t))


def control_lookup(plan: TrajectoryPlan, t: float) -> np.ndarray:
    """Planned control held at time ``t``; zero past the horizon."""
    k = math.floor((t - plan.start_time) / plan.dt + 1e-9)
    if k < 0 or k >= plan.steps:
        return np.zeros(plan.controls.shape[1])
    return plan.controls[k].copy()


def align_goal_quaternion(initial: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Flip the goal quaternion sign onto the initial one's hemisphere."""
    goal = goal.copy()
    if goal[QUAT] @ initial[QUAT] < 0:
        goal[QUAT] = -goal[QUAT]
    return goal


def _violated_rows(states: np.ndarray, constraints: ConstraintSet, keep_out: np.ndarray | None,
                   tol: float = 1e-9) -> tuple[list[SoftRow], float]:
    rows, worst = [], 0.0
    n = states.shape[1]
    for k in range(1, len(states)):
        s = states[k]
        for i in range(n):
            if s[i] > constraints.state_upper[i] + tol:
                coeffs = np.zeros(n)
                coeffs[i] = 1.0
                rows.append(SoftRow(k, coeffs, float(constraints.state_upper[i])))
                worst = max(worst, s[i] - constraints.state_upper[i])
            elif s[i] < constraints.state_lower[i] - tol:
                coeffs = np.zeros(n)
                coeffs[i] = -1.0
                rows.append(SoftRow(k, coeffs, float(-constraints.state_lower[i])))
                worst = max(worst, constraints.state_lower[i] - s[i])
        if keep_out is not None:
            coeffs, bound = keep_out
            if coeffs @ s > bound + tol:
                rows.append(SoftRow(k, coeffs, bound))
                worst = max(worst, coeffs @ s - bound)
    return rows, worst


def rollout(model: LinearModel, initial: np.ndarray, controls: np.ndarray) -> np.ndarray:
    states = np.empty((len(controls) + 1, model.n_states))
    states[0] = initial
    for k, u in enumerate(controls):
        states[k + 1] = model.a_mat @ states[k] + model.b_mat @ u + model.offset
    return states


def plan_trajectory(initial: StateVector, goal: StateVector, params: SpacecraftParams,
                    horizon: HorizonConfig, constraints: ConstraintSet, start_time: float = 0.0,
                    keep_out_active: bool = True, tol: float = 1e-8, max_iter: int = 5000,
                    max_rounds: int = 4) -> TrajectoryPlan:
    """Plan an optimal trajectory from ``initial`` toward ``goal``.

    The keep-out sphere is linearized once, as the half-space beyond the
    sphere along the current bearing from its center; it is skipped when
    ``keep_out_active`` is false or the start already lies inside the sphere.
    """
    s0 = initial.as_array()
    sf = align_goal_quaternion(s0, goal.as_array())
    model = discretize(linearize(initial, ControlInput.zero(), params), horizon.dt)

    keep_out = None
    if keep_out_active and constraints.keep_out_radius > 0:
        rel = s0[POS] - constraints.keep_out_center
        dist = float(np.linalg.norm(rel))
        if dist > constraints.keep_out_radius:
            e = rel / dist
            coeffs = np.zeros(s0.size)
            coeffs[POS] = -e
            keep_out = (coeffs, float(-constraints.keep_out_radius - e @ constraints.keep_out_center))

    # inputs pinned to zero width (e.g. out-of-plane axes) leave the QP
    active = constraints.input_lower < constraints.input_upper
    pinned = constraints.input_lower.copy()
    reduced_model = LinearModel(model.a_mat, model.b_mat[:, active],
                                model.offset + model.b_mat[:, ~active] @ pinned[~active], step=model.step)
    reduced_horizon = HorizonConfig(horizon.steps, horizon.dt, horizon.state_weight,
                                    horizon.input_weight[np.ix_(active, active)], horizon.terminal_weight)
    reduced_constraints = ConstraintSet(constraints.state_lower, constraints.state_upper,
                                        constraints.input_lower[active], constraints.input_upper[active])
    pinned_cost = horizon.steps * float(pinned @ horizon.input_weight @ pinned)

    soft: list[SoftRow] = []
    x_warm = None
    history: list[float] = []
    for _ in range(max_rounds):
        qp = build_qp(s0, sf, reduced_model, reduced_horizon, reduced_constraints, soft)
        qp.constant += pinned_cost
        result = solve_qp(qp, tol=tol, max_iter=max_iter, x0=x_warm)
        history.extend(result.history)
        x_warm = result.x
        controls = np.tile(pinned, (horizon.steps, 1))
        controls[:, active] = result.x.reshape(horizon.steps, -1)
        states = rollout(model, s0, controls)
        new_rows, worst = _violated_rows(states, constraints, keep_out)
        known = {(r.step, r.coeffs.tobytes()) for r in soft}
        new_rows = [r for r in new_rows if (r.step, r.coeffs.tobytes()) not in known]
        if not new_rows:
            break
        soft.extend(new_rows)

    return TrajectoryPlan(
        states=states,
        controls=controls,
        start_time=float(start_time),
        dt=horizon.dt,
        status=result.status,
        cost=result.objective,
        max_violation=float(worst),
        solver_history=history,
    )


def default_state_weight(pos: float = 1.0, vel: float = 10.0, att: float = 5.0, rate: float = 50.0) -> np.ndarray:
    """13x13 diagonal weight with per-group values; all four quaternion entries share ``att``."""
    return np.diag([pos] * 3 + [vel] * 3 + [att] * 4 + [rate] * 3)


def default_input_weight(params: SpacecraftParams, per_axis: float = 10.0) -> np.ndarray:
    """Control weight equivalent to ``per_axis`` on the unit-normalized action."""
    return np.diag(per_axis / params.control_limits**2)

