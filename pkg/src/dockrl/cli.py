"""
Command-line entry point.

Subcommands:
    train      train PPO or SAC, with or without MPC reward shaping
    evaluate   Monte Carlo evaluation of a checkpoint, the MPC oracle or the null policy
    simulate   dump one episode as a per-step trace
    plan       solve one MPC problem and dump the plan
    report     compare several runs.csv files from ``evaluate``

Every CSV starts with a ``# key=value ...`` line carrying the config hash
and seed, then a header row. Floats are written with 17 significant digits.
Exit status: 0 on success, 1 on divergence, solver or integration failure
(including a plan that did not converge), 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, config_hash, load_scenario, read_scenario_dict, training_settings
from .dynamics import STATE_DIM, StateVector, attitude_error_angle
from .env import DockingEnv, ScenarioConfig
from .errors import (
    ConfigError, DivergenceError, DockError, DynamicsInputError, EpisodeError, IntegrationError,
    NumericError, ParameterError, SolverError,
)
from .evaluation import (
    AgentPolicy, MpcPolicy, NullPolicy, Policy, RECORD_FIELDS, compare_methods, easy_scenario,
    record_dict, report_from_rows, run_monte_carlo, run_seeds,
)
from .mpc import plan_trajectory
from .training import load_state, new_state, save_state, train

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

STATE_COLUMNS = ("x", "y", "z", "vx", "vy", "vz", "qx", "qy", "qz", "qw", "wx", "wy", "wz")
CONTROL_COLUMNS = ("fx", "fy", "fz", "tx", "ty", "tz")


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if v is None:
        return "nan"
    return str(v)


def header_line(**fields) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in fields.items())


def write_csv(path: Path, columns, rows, meta: dict) -> Path:
    """Write ``rows`` (sequences or dicts) under a metadata line and header row."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(header_line(**meta) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            vals = [row[c] for c in columns] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in vals])
    return path


def read_csv(path: Path) -> tuple[dict, list[dict]]:
    """Metadata dict and data rows of a file written by ``write_csv``."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ConfigError(f"{path} has no metadata line")
        meta = dict(item.split("=", 1) for item in first[1:].split() if "=" in item)
        rows = list(csv.DictReader(fh))
    return meta, rows


def _write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------

def _fill_override(data: dict, fill_percent: float | None) -> dict:
    if fill_percent is None:
        return {}
    if not 0 <= fill_percent <= 100:
        raise ConfigError("--fill is a percentage in [0, 100]")
    if data.get("slosh") is None:
        raise ConfigError("--fill given but the scenario has no slosh section")
    return {"slosh": {"fill_fraction": fill_percent / 100.0, "enabled": True}}


def _scenario(args, extra: dict | None = None) -> tuple[ScenarioConfig, dict]:
    base = read_scenario_dict(args.scenario)
    overrides = dict(extra or {})
    overrides.update(_fill_override(base, args.fill))
    if getattr(args, "episode_limit", None) is not None:
        overrides["episode_limit"] = args.episode_limit
    return load_scenario(args.scenario, overrides)


def _parse_initial(text: str, scenario: ScenarioConfig) -> StateVector:
    vals = [float(v) for v in text.replace(" ", "").split(",") if v]
    goal_q = scenario.goal_state.quat
    if len(vals) == 3:
        return StateVector.at_rest(vals, goal_q)
    if len(vals) == 6:
        return StateVector(np.array(vals[:3]), np.array(vals[3:]), goal_q, np.zeros(3))
    if len(vals) == STATE_DIM:
        x = np.array(vals)
        x[6:10] /= np.linalg.norm(x[6:10])
        return StateVector.from_array(x)
    raise ConfigError("--initial takes 3 (position), 6 (position, velocity) or 13 state values")


def _policy(args, scenario: ScenarioConfig) -> tuple[Policy, str, dict]:
    """Policy, method name and checkpoint metadata (empty for scripted policies)."""
    kind = args.policy
    if getattr(args, "zero_action", False):
        kind = "null"
    if kind == "null":
        return NullPolicy(), "null", {}
    if kind == "mpc":
        return MpcPolicy(), "mpc-only", {}
    if args.checkpoint is None:
        raise ConfigError("--policy agent needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    state, meta = load_state(path)
    if state.agent.obs_dim != scenario.obs_dim or state.agent.act_dim != scenario.act_dim:
        raise ConfigError(
            f"checkpoint expects obs/act dims {state.agent.obs_dim}/{state.agent.act_dim}, "
            f"scenario {scenario.name!r} has {scenario.obs_dim}/{scenario.act_dim}")
    method = state.algo + ("-mpc" if state.mpc_shaping else "")
    return AgentPolicy(state.agent, name=method), method, meta


def _on(flag: str) -> bool:
    return flag == "on"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    data = read_scenario_dict(args.scenario)
    cfg, profile = training_settings(data, args.algo, args.budget)
    batches = profile.get("batches") if args.batches is None else args.batches
    batch_episodes = int(profile.get("batch_episodes", 1))
    if batches is None or batches < 1:
        raise ConfigError("the training budget needs a positive number of batches")
    extra = {"episode_limit": profile["episode_limit"]} if "episode_limit" in profile else {}
    scenario, merged = _scenario(args, extra)
    mpc = _on(args.mpc)
    scen_hash = config_hash(merged)
    run_hash = config_hash(merged, args.algo, mpc, vars(cfg), batch_episodes)
    out = Path(args.out)
    ckpt = out / "checkpoint.npz"

    if args.resume:
        state, meta = load_state(args.resume)
        if meta.get("scenario_hash") != scen_hash:
            raise ConfigError("checkpoint was trained on a different scenario")
        if (state.algo, state.mpc_shaping, state.seed) != (args.algo, mpc, args.seed):
            raise ConfigError("checkpoint algorithm, shaping flag or seed differ from the command line")
    else:
        state = new_state(args.algo, scenario, cfg, args.seed, mpc, batch_episodes)

    every = args.checkpoint_every
    report_every = max(1, batches // 10)

    def on_batch(st, row):
        if every and st.next_batch % every == 0:
            save_state(ckpt, st, scen_hash, {"config_hash": run_hash})
        if not args.quiet and (st.next_batch % report_every == 0 or st.next_batch == batches):
            print(f"batch {row['batch']:>6d}  task return {row['mean_task_return']:>12.3f}  "
                  f"success {row['success_fraction']:.2f}", flush=True)

    remaining = max(0, batches - state.next_batch)
    train(state, scenario, remaining, on_batch)
    save_state(ckpt, state, scen_hash, {"config_hash": run_hash})
    meta = {"config_hash": run_hash, "seed": args.seed, "algo": args.algo, "mpc": args.mpc}
    write_csv(out / "training_log.csv", state.log_columns, state.log, meta)
    norm = state.curve.normalized
    curve_rows = [(i, r, n) for i, (r, n) in enumerate(zip(state.curve.returns, norm))]
    write_csv(out / "training_curve.csv", ("batch", "mean_task_return", "normalized"), curve_rows, meta)
    if state.curve.returns:
        print(f"final-quarter task return {state.curve.final_quarter_mean():.6g}; wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.runs < 1:
        raise ParameterError("--runs must be at least 1")
    scenario, merged = _scenario(args)
    if args.easy:
        scenario = easy_scenario(scenario)
    policy, method, meta = _policy(args, scenario)
    scen_hash = config_hash(merged, args.easy)
    run_hash = config_hash(merged, args.easy, method, meta.get("config_hash", ""), args.mpc, args.runs)
    report = run_monte_carlo(policy, scenario, args.runs, args.seed, method=method,
                             mpc_shaping=_on(args.mpc), config_hash=scen_hash)
    out = Path(args.out)
    header = {"config_hash": run_hash, "seed": args.seed, "method": method, "scenario": scenario.name,
              "scenario_hash": scen_hash}
    write_csv(out / "runs.csv", RECORD_FIELDS, [record_dict(r) for r in report.records], header)
    summary = {**report.summary(), "config_hash": run_hash, "scenario_hash": scen_hash}
    _write_json(out / "summary.json", summary)
    print(f"{method}: success {report.successes}/{report.runs}  "
          f"pos error {report.pos_error[0]:.4g} m  effort {report.control_effort[0]:.4g} N s")
    return EXIT_OK


def trace_columns(act_dim: int) -> tuple[str, ...]:
    return (("t",) + STATE_COLUMNS + tuple(f"a{i}" for i in range(act_dim)) + CONTROL_COLUMNS
            + ("reward", "task_reward", "fs_x", "fs_y", "fs_z", "ts_x", "ts_y", "ts_z")
            + tuple(f"ref_{c}" for c in STATE_COLUMNS))


def simulate_episode(scenario: ScenarioConfig, policy: Policy, seed: int, mpc_shaping: bool,
                     initial: StateVector | None = None) -> tuple[list[list[float]], DockingEnv]:
    """Run one episode and return its trace rows (row 0 is the initial state)."""
    env = DockingEnv(scenario, mpc_shaping=mpc_shaping)
    start_rng, policy_rng = run_seeds(seed, 0)
    nan = float("nan")
    m = scenario.act_dim
    obs = env.reset(start_rng, initial=initial)
    policy.reset(env, policy_rng)
    x0 = env.x.copy()
    trace = []
    while not env.done:
        tr = env.step(policy.act(obs, env))
        obs = tr.next_obs
        trace.append((env.time, tr))
    rows = [[0.0, *x0, *([nan] * m), *([nan] * 6), nan, nan, *([0.0] * 6), *([nan] * STATE_DIM)]]
    for t, tr in trace:
        ref = tr.info["reference"]
        ref = [nan] * STATE_DIM if ref is None else list(ref)
        rows.append([t, *tr.next_state, *tr.action, *tr.control, tr.reward, tr.task_reward,
                     *tr.info["slosh_force_vec"], *tr.info["slosh_torque_vec"], *ref])
    return rows, env


def cmd_simulate(args) -> int:
    scenario, merged = _scenario(args)
    if args.easy:
        scenario = easy_scenario(scenario)
    policy, method, meta = _policy(args, scenario)
    initial = _parse_initial(args.initial, scenario) if args.initial else None
    mpc = _on(args.mpc)
    rows, env = simulate_episode(scenario, policy, args.seed, mpc, initial)
    run_hash = config_hash(merged, args.easy, method, meta.get("config_hash", ""), args.mpc, args.initial)
    out = Path(args.out)
    write_csv(out / "trace.csv", trace_columns(scenario.act_dim), rows,
              {"config_hash": run_hash, "seed": args.seed, "method": method, "cause": env.cause})
    print(f"{method}: {env.steps} steps, ended with {env.cause}; wrote {out / 'trace.csv'}")
    return EXIT_OK


def cmd_plan(args) -> int:
    scenario, merged = _scenario(args)
    if args.initial:
        initial = _parse_initial(args.initial, scenario)
    else:
        env = DockingEnv(scenario)
        env.reset(run_seeds(args.seed, 0)[0])
        initial = env.state
    horizon = scenario.oracle_horizon() if args.horizon == "oracle" else scenario.horizon()
    aligned = math.degrees(attitude_error_angle(initial.quat, scenario.goal_state.quat)) \
        < scenario.stabilization.att_tol_deg
    plan = plan_trajectory(initial, scenario.goal_state, scenario.spacecraft, horizon, scenario.constraints(),
                           keep_out_active=not aligned)
    rows = []
    for k, t in enumerate(plan.times):
        u = plan.controls[k] if k < plan.steps else [float("nan")] * 6
        rows.append([t, *plan.states[k], *u])
    run_hash = config_hash(merged, args.horizon, initial.as_array())
    out = Path(args.out)
    write_csv(out / "plan.csv", ("t",) + STATE_COLUMNS + CONTROL_COLUMNS, rows,
              {"config_hash": run_hash, "seed": args.seed, "status": plan.status})
    print(f"plan {plan.status}: cost {plan.cost:.6g}, effort {plan.effort():.6g} N s, "
          f"max violation {plan.max_violation:.3g}; wrote {out / 'plan.csv'}")
    return EXIT_OK if plan.status == "converged" else EXIT_FAILURE


def cmd_report(args) -> int:
    if len(args.runs_files) < 2:
        raise ConfigError("report needs at least two runs.csv files")
    reports = []
    for path in args.runs_files:
        meta, rows = read_csv(Path(path))
        try:
            reports.append(report_from_rows(rows, meta["method"], meta["scenario"], int(meta["seed"]),
                                            meta.get("scenario_hash", "")))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path} is not a runs file: {exc!r}") from exc
    comparison = compare_methods(reports, n_boot=args.boot, seed=args.seed)
    rows = comparison.rows()
    columns = tuple(rows[0])
    out = Path(args.out)
    write_csv(out / "comparison.csv", columns, rows,
              {"config_hash": config_hash([r.config_hash for r in reports], args.boot), "seed": args.seed,
               "reference": comparison.reference})
    for row in rows:
        print(f"{row['method']:>10s}  success {row['success_mean']:.3f}  pos error {row['pos_error_mean']:.4g}  "
              f"effort {row['control_effort_mean']:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dockrl", description="Spacecraft docking with RL and MPC.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", default="planar_lab",
                        help=f"preset name ({', '.join(PRESETS)}) or YAML path")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--fill", type=float, default=None, help="tank fill level in percent")
    common.add_argument("--mpc", choices=("on", "off"), default="off", help="MPC reward shaping")
    common.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train an agent")
    p.add_argument("--algo", choices=("ppo", "sac"), default="ppo")
    p.add_argument("--budget", choices=("desk", "full"), default="desk")
    p.add_argument("--batches", type=int, default=None, help="total batches (overrides the budget)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0, help="save every N batches (0: only at the end)")
    p.set_defaults(func=cmd_train)

    policy = argparse.ArgumentParser(add_help=False)
    policy.add_argument("--policy", choices=("agent", "mpc", "null"), default="agent")
    policy.add_argument("--checkpoint", default=None)
    policy.add_argument("--easy", action="store_true", help="start near the goal with the goal attitude")
    policy.add_argument("--episode-limit", type=float, default=None, help="episode length in seconds")

    p = sub.add_parser("evaluate", parents=[common, policy], help="Monte Carlo evaluation")
    p.add_argument("--runs", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", parents=[common, policy], help="trace one episode")
    p.add_argument("--zero-action", action="store_true", help="free drift (overrides --policy)")
    p.add_argument("--initial", default=None, help="comma-separated initial state (3, 6 or 13 values)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan", parents=[common], help="single MPC plan")
    p.add_argument("--initial", default=None, help="comma-separated initial state (3, 6 or 13 values)")
    p.add_argument("--horizon", choices=("oracle", "shaping"), default="oracle")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("report", help="compare runs.csv files from evaluate")
    p.add_argument("runs_files", nargs="+")
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--boot", type=int, default=1000, help="bootstrap resamples")
    p.set_defaults(func=cmd_report, fill=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, DynamicsInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, SolverError, IntegrationError, NumericError, EpisodeError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except DockError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
