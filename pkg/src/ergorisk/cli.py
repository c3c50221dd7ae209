"""Experiment runner.

Subcommands: ``solve`` (risk-constrained design), ``estimate`` (risk-variance
estimators side by side), ``simulate`` (seeded rollouts to CSV), ``compare``
(matched-seed evaluation of the constrained policy against plain LQR), and
``check`` (assumption screening only).

Exit codes: 0 success, 2 validation failure, 3 solver failure, 4 I/O failure.
Result bundles are deterministic for a fixed config and master seed; the
timestamp field is excluded from the bundle hash.
"""

import argparse
import os
import sys as _sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats as _scipy_stats

from . import __version__, control, matops, pdopt, risk as risk_mod, system
from .config import ExperimentConfig
from .errors import (
    AssumptionViolation,
    ConfigError,
    DivergedRollout,
    ErgoRiskError,
    NotControllable,
    NotStabilizable,
    RiskMomentUnavailable,
    ShapeError,
    UnstableMatrix,
)
from .serialize import canonical_json, sha256_of, write_csv

_VALIDATION_ERRORS = (
    ConfigError,
    ShapeError,
    RiskMomentUnavailable,
    AssumptionViolation,
    NotStabilizable,
    ValueError,
)

# Marginal kurtosis above which heavy-tail estimators are flagged as slow.
_KURTOSIS_WARN = 20.0


def resolve_workers(flag) -> int:
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("ERGORISK_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"ERGORISK_WORKERS must be an integer, got {env!r}")
    return 1


def screen_assumptions(cfg: ExperimentConfig):
    """Check model assumptions A1-A3 and build the problem objects.

    A1: zero-mean i.i.d. noise, positive definite covariance, finite fourth
        moment. A2: stabilizable (A, B). A3: positive definite state cost and
        full row rank H. (A4, strict feasibility, needs the resolved budget
        and is screened separately.)
    Returns (report rows, system, cost, risk); build stops at the first
    violated assumption.
    """
    rows = []

    def fail(aid, detail):
        rows.append({"assumption": aid, "ok": False, "detail": detail})
        return rows, None, None, None

    try:
        plant = cfg.build_system()
    except (RiskMomentUnavailable,) as err:
        return fail("A1", str(err))
    except NotStabilizable as err:
        return fail("A2", str(err))
    except ShapeError as err:
        return fail("A1", str(err))
    rows.append({"assumption": "A1", "ok": True, "detail": "noise zero-mean, PD covariance, finite fourth moment"})
    rows.append({"assumption": "A2", "ok": True, "detail": "(A, B) stabilizable"})

    try:
        cost = cfg.build_cost()
    except ShapeError as err:
        return fail("A3", str(err))
    if np.linalg.matrix_rank(plant.H) < plant.n:
        return fail("A3", "H is not full row rank")
    rows.append({"assumption": "A3", "ok": True, "detail": "Q positive definite, H full row rank"})

    # risk-weight validity is plain config validation, not a model assumption
    risk = cfg.build_risk()
    return rows, plant, cost, risk


def _slater_row(report: pdopt.SlaterReport) -> dict:
    return {
        "assumption": "A4",
        "ok": report.ok,
        "detail": f"feasibility sweep status: {report.status}",
        "probes": [
            {"multiplier": lam, "cond_variance": val} for lam, val in report.probes
        ],
    }


def _finalize_bundle(bundle: dict, out_dir: Path, fmt: str) -> Path:
    bundle = dict(bundle)
    bundle["tool_version"] = __version__
    bundle["result_hash"] = sha256_of(bundle)
    bundle["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "bundle.json"
    path.write_text(canonical_json(bundle) + "\n")
    if fmt == "csv" and "scalars" in bundle:
        write_csv(
            out_dir / "scalars.csv",
            ["key", "value"],
            sorted(bundle["scalars"].items()),
        )
    return path


def _kkt_dict(report: pdopt.KktReport) -> dict:
    return {
        "gain": report.gain.tolist(),
        "lambda_avg": report.lambda_avg,
        "lambda_last": report.lambda_last,
        "grad_norm": report.grad_norm,
        "slack": report.slack,
        "cs_residual": report.cs_residual,
        "cost": report.cost,
        "cond_variance": report.cond_variance,
        "outer_iters": report.outer_iters,
        "total_inner_iters": report.total_inner_iters,
        "feasible": report.feasible,
        "short_circuit": report.short_circuit,
    }


def _write_outer_trace(report: pdopt.KktReport, path: Path):
    write_csv(
        path,
        ["m", "lambda", "cond_variance", "slack", "cost", "grad_norm", "inner_iters"],
        report.trace,
    )


def cmd_check(cfg: ExperimentConfig, out_dir: Path, workers: int, fmt: str):
    rows, plant, cost, risk = screen_assumptions(cfg)
    bundle = {
        "command": "check",
        "config": cfg.data,
        "config_hash": cfg.config_hash,
        "assumptions": rows,
    }
    if plant is None:
        return bundle, 2
    lqr = control.lqr_solve(plant, cost)
    gamma_lqr = risk_mod.asymptotic_conditional_variance(plant, lqr.gain, risk)
    budget = cfg.resolve_budget(gamma_lqr)
    slater = pdopt.check_slater(plant, cost, risk, budget)
    rows.append(_slater_row(slater))
    bundle["scalars"] = {
        "cost_lqr": control.average_cost(plant, cost, lqr.gain),
        "cond_variance_lqr": gamma_lqr,
        "risk_budget": budget,
    }
    return bundle, 0 if all(r["ok"] for r in rows) else 2


def cmd_solve(cfg: ExperimentConfig, out_dir: Path, workers: int, fmt: str):
    rows, plant, cost, risk = screen_assumptions(cfg)
    bundle = {
        "command": "solve",
        "config": cfg.data,
        "config_hash": cfg.config_hash,
        "assumptions": rows,
    }
    if plant is None:
        return bundle, 2

    lqr = control.lqr_solve(plant, cost)
    gamma_lqr = risk_mod.asymptotic_conditional_variance(plant, lqr.gain, risk)
    cost_lqr = control.average_cost(plant, cost, lqr.gain)
    budget = cfg.resolve_budget(gamma_lqr)
    slater = pdopt.check_slater(plant, cost, risk, budget)
    rows.append(_slater_row(slater))
    if slater.status == "infeasible_evidence":
        bundle["scalars"] = {
            "cost_lqr": cost_lqr,
            "cond_variance_lqr": gamma_lqr,
            "risk_budget": budget,
        }
        return bundle, 2

    try:
        report = pdopt.primal_dual_solve(plant, cost, risk, cfg.solver_config(budget))
    except ErgoRiskError as err:
        bundle["error"] = {"type": type(err).__name__, "message": str(err)}
        return bundle, 3

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_outer_trace(report, out_dir / "outer_trace.csv")
    inner = control.minimize_lagrangian(
        plant, cost, risk, report.lambda_last, eps=cfg.data["solver"]["eps"], track_values=True
    )
    write_csv(
        out_dir / "inner_trace.csv",
        ["iteration", "lagrangian", "grad_norm", "closed_loop_rho"],
        list(zip(range(len(inner.values)), inner.values, inner.grad_norms, inner.rhos)),
    )

    bundle["kkt"] = _kkt_dict(report)
    bundle["gains"] = {"lqr": lqr.gain.tolist(), "constrained": report.gain.tolist()}
    bundle["scalars"] = {
        "cost_lqr": cost_lqr,
        "cost_constrained": report.cost,
        "cost_ratio": report.cost / cost_lqr,
        "cond_variance_lqr": gamma_lqr,
        "cond_variance_constrained": report.cond_variance,
        "cond_variance_ratio": report.cond_variance / gamma_lqr,
        "risk_budget": budget,
    }
    bundle["trace_files"] = ["outer_trace.csv", "inner_trace.csv"]
    return bundle, 0


def _resolve_gain(cfg: ExperimentConfig, plant, cost, risk):
    source = cfg.data["gain"]["source"]
    if source == "explicit":
        return np.array(cfg.data["gain"]["K"]), None
    lqr = control.lqr_solve(plant, cost)
    if source == "lqr":
        return lqr.gain, None
    gamma_lqr = risk_mod.asymptotic_conditional_variance(plant, lqr.gain, risk)
    budget = cfg.resolve_budget(gamma_lqr)
    if pdopt.check_slater(plant, cost, risk, budget).status == "infeasible_evidence":
        raise ConfigError(
            f"risk budget {budget:.6g} is not attainable by any stabilizing gain"
        )
    report = pdopt.primal_dual_solve(plant, cost, risk, cfg.solver_config(budget))
    return report.gain, report


def cmd_estimate(cfg: ExperimentConfig, out_dir: Path, workers: int, fmt: str):
    rows, plant, cost, risk = screen_assumptions(cfg)
    bundle = {
        "command": "estimate",
        "config": cfg.data,
        "config_hash": cfg.config_hash,
        "assumptions": rows,
    }
    if plant is None:
        return bundle, 2

    gain, _ = _resolve_gain(cfg, plant, cost, risk)
    if not matops.is_schur_stable(plant.A + plant.B @ np.asarray(gain, dtype=float)):
        bundle["error"] = {"type": "UnstableMatrix", "message": "requested gain is not stabilizing"}
        return bundle, 2

    warnings = []
    kurt = plant.noise.kurtosis
    if kurt > _KURTOSIS_WARN:
        warnings.append(
            f"noise kurtosis {kurt:.3g} exceeds {_KURTOSIS_WARN:g}; "
            "Monte Carlo moments converge slowly"
        )

    sim = cfg.data["simulation"]
    horizon, rollouts, stride = sim["horizon"], sim["rollouts"], sim["stride"]
    burn = sim.get("burn_in")
    analytic = risk_mod.asymptotic_conditional_variance(plant, gain, risk)
    clt = risk_mod.estimate_clt_variance(
        plant, gain, risk, horizon, rollouts, seed=cfg.master_seed, burn_in=burn, workers=workers
    )
    sums = risk_mod.normalized_sums(
        plant, gain, risk, horizon, rollouts, seed=cfg.master_seed, burn_in=burn, workers=workers
    )
    if analytic > 0.0:
        ks_stat = float(_scipy_stats.kstest(sums / np.sqrt(analytic), "norm").statistic)
    else:
        ks_stat = float("nan") if np.any(sums) else 0.0

    t, s_norm, n_norm = risk_mod.running_stats_trace(
        plant, gain, risk, horizon, seed=cfg.master_seed, burn_in=burn, stride=stride
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(
        out_dir / "estimator_trace.csv",
        ["t", "norm_increment_sum", "norm_cond_variance"],
        zip(t.tolist(), s_norm.tolist(), n_norm.tolist()),
    )

    bundle["gain"] = gain.tolist()
    bundle["warnings"] = warnings
    bundle["scalars"] = {
        "cond_variance_analytic": analytic,
        "cond_variance_mc_clt": clt.value,
        "cond_variance_mc_clt_stderr": clt.stderr,
        "cond_variance_running": float(n_norm[-1]),
        "ks_statistic": ks_stat,
        "ks_critical_1pct": 1.628 / np.sqrt(rollouts),
        "noise_kurtosis": kurt,
    }
    bundle["trace_files"] = ["estimator_trace.csv"]
    return bundle, 0


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path, workers: int, fmt: str):
    rows, plant, cost, risk = screen_assumptions(cfg)
    bundle = {
        "command": "simulate",
        "config": cfg.data,
        "config_hash": cfg.config_hash,
        "assumptions": rows,
    }
    if plant is None:
        return bundle, 2
    gain, _ = _resolve_gain(cfg, plant, cost, risk)
    sim = cfg.data["simulation"]
    schedule = cfg.build_schedule()
    seeds = system.derive_seeds(cfg.master_seed, sim["rollouts"])
    try:
        batch = system.simulate_batch(
            plant, gain, seeds, horizon=sim["horizon"], schedule=schedule
        )
    except DivergedRollout as err:
        bundle["error"] = {"type": "DivergedRollout", "message": str(err), "time": err.time}
        return bundle, 3

    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(batch.rollouts):
        name = f"rollout_{i:04d}.csv"
        system.trajectory_to_csv(batch, out_dir / name, rollout=i)
        files.append(name)
    header = {
        "seed": cfg.master_seed,
        "config_hash": cfg.config_hash,
        "rollouts": batch.rollouts,
        "horizon": batch.horizon,
        "files": files,
    }
    (out_dir / "trajectories.json").write_text(canonical_json(header) + "\n")
    bundle["gain"] = np.asarray(gain, dtype=float).tolist()
    bundle["trace_files"] = files + ["trajectories.json"]
    return bundle, 0


def _arm_chunk(payload):
    plant, gain, seeds, horizon, schedule = payload
    batch = system.simulate_batch(plant, gain, seeds, horizon=horizon, schedule=schedule)
    return batch.states, batch.inputs


_ARM_CHUNK = 256  # fixed so results never depend on the worker count


def _simulate_arm(plant, gain, seeds, horizon, schedule, workers):
    chunks = [seeds[i : i + _ARM_CHUNK] for i in range(0, len(seeds), _ARM_CHUNK)]
    payloads = [(plant, gain, list(c), horizon, schedule) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_arm_chunk, payloads))
    else:
        parts = [_arm_chunk(p) for p in payloads]
    states = np.concatenate([p[0] for p in parts])
    inputs = np.concatenate([p[1] for p in parts])
    return states, inputs


def _arm_stats(plant, cost, risk, gain, states, inputs, schedule):
    """Per-rollout summaries for one policy arm."""
    r, t_plus_1, _ = states.shape
    horizon = t_plus_1 - 1
    q, rmat = cost.Q, cost.R
    step_cost = np.einsum("rti,ij,rtj->rt", states, q, states) + np.einsum(
        "rti,ij,rtj->rt", inputs, rmat, inputs
    )
    j_emp = step_cost.mean(axis=1)

    acc = risk_mod.RiskAccumulator(plant, gain, risk)
    n_over_t = np.array(
        [acc.conditional_variances_along(states[i]).mean() for i in range(r)]
    )

    sigma = control.stationary_covariance(plant, gain)
    band = 2.0 * np.sqrt(np.trace(sigma))
    norms = np.linalg.norm(states, axis=2)

    peaks, recoveries = [], []
    if schedule.enabled:
        gusts = range(schedule.period, horizon + 1, schedule.period)
        for g in gusts:
            end = min(g + schedule.period, horizon + 1)
            window = norms[:, g:end]
            peaks.append(window.max(axis=1))
            inside = window <= band
            hit = inside.any(axis=1)
            first = np.where(hit, inside.argmax(axis=1), window.shape[1])
            recoveries.append(first)
    return {
        "cost_mean": float(j_emp.mean()),
        "cost_stderr": float(j_emp.std(ddof=1) / np.sqrt(r)),
        "n_over_t": n_over_t,
        "n_over_t_mean": float(n_over_t.mean()),
        "n_over_t_stderr": float(n_over_t.std(ddof=1) / np.sqrt(r)),
        "peak_norm_median": float(np.median(np.concatenate(peaks))) if peaks else None,
        "recovery_steps_median": float(np.median(np.concatenate(recoveries))) if recoveries else None,
        "recovery_band": float(band),
        "norms": norms,
        "step_cost": step_cost,
    }


def compare_policies(plant, cost, risk, gain_a, gain_b, seeds, horizon, schedule, workers=1):
    """Matched-seed comparison of two policies; identical noise streams feed
    both arms. Returns (stats_a, stats_b); a diverged arm is reported as an
    error entry without aborting the other."""
    out = []
    for gain in (gain_a, gain_b):
        try:
            states, inputs = _simulate_arm(plant, gain, seeds, horizon, schedule, workers)
            out.append(_arm_stats(plant, cost, risk, gain, states, inputs, schedule))
        except DivergedRollout as err:
            out.append({"error": {"type": "DivergedRollout", "message": str(err), "time": err.time}})
    return out


def cmd_compare(cfg: ExperimentConfig, out_dir: Path, workers: int, fmt: str):
    rows, plant, cost, risk = screen_assumptions(cfg)
    bundle = {
        "command": "compare",
        "config": cfg.data,
        "config_hash": cfg.config_hash,
        "assumptions": rows,
    }
    if plant is None:
        return bundle, 2

    lqr = control.lqr_solve(plant, cost)
    gamma_lqr = risk_mod.asymptotic_conditional_variance(plant, lqr.gain, risk)
    budget = cfg.resolve_budget(gamma_lqr)
    slater = pdopt.check_slater(plant, cost, risk, budget)
    rows.append(_slater_row(slater))
    if slater.status == "infeasible_evidence":
        bundle["scalars"] = {"cond_variance_lqr": gamma_lqr, "risk_budget": budget}
        return bundle, 2
    try:
        report = pdopt.primal_dual_solve(plant, cost, risk, cfg.solver_config(budget))
    except ErgoRiskError as err:
        bundle["error"] = {"type": type(err).__name__, "message": str(err)}
        return bundle, 3

    sim = cfg.data["simulation"]
    schedule = cfg.build_schedule()
    seeds = system.derive_seeds(cfg.master_seed, sim["rollouts"])
    arm_lqr, arm_star = compare_policies(
        plant, cost, risk, lqr.gain, report.gain, seeds, sim["horizon"], schedule, workers
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    trace_files = []
    for label, arm in (("lqr", arm_lqr), ("constrained", arm_star)):
        if "error" in arm:
            continue
        name = f"compare_{label}.csv"
        norms, step_cost = arm["norms"], arm["step_cost"]
        write_csv(
            out_dir / name,
            ["t", "state_norm_median", "state_norm_p90", "step_cost_mean"],
            zip(
                range(norms.shape[1]),
                np.median(norms, axis=0).tolist(),
                np.percentile(norms, 90, axis=0).tolist(),
                step_cost.mean(axis=0).tolist(),
            ),
        )
        trace_files.append(name)

    def public(arm):
        if "error" in arm:
            return arm
        return {k: v for k, v in arm.items() if k not in ("norms", "step_cost", "n_over_t")}

    bundle["kkt"] = _kkt_dict(report)
    bundle["gains"] = {"lqr": lqr.gain.tolist(), "constrained": report.gain.tolist()}
    bundle["arms"] = {"lqr": public(arm_lqr), "constrained": public(arm_star)}
    if "error" not in arm_lqr and "error" not in arm_star:
        diff = arm_lqr["n_over_t"] - arm_star["n_over_t"]
        se = float(diff.std(ddof=1) / np.sqrt(len(diff)))
        bundle["paired"] = {
            "n_over_t_diff_mean": float(diff.mean()),
            "n_over_t_diff_stderr": se,
            "separation_sigmas": float(diff.mean() / se) if se > 0 else None,
        }
    bundle["scalars"] = {
        "cost_lqr": control.average_cost(plant, cost, lqr.gain),
        "cost_constrained": report.cost,
        "cond_variance_lqr": gamma_lqr,
        "cond_variance_constrained": report.cond_variance,
        "risk_budget": budget,
    }
    bundle["trace_files"] = trace_files
    return bundle, 0


_COMMANDS = {
    "solve": cmd_solve,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ergorisk",
        description="Risk-constrained linear-quadratic control experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("solve", "solve the risk-constrained design problem"),
        ("estimate", "risk-variance estimators side by side"),
        ("simulate", "seeded closed-loop rollouts to CSV"),
        ("compare", "matched-seed comparison against plain LQR"),
        ("check", "assumption screening only"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the experiment JSON")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--workers", type=int, default=None, help="rollout worker processes")
        p.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        workers = resolve_workers(args.workers)
        bundle, code = _COMMANDS[args.command](cfg, out_dir, workers, args.format)
        path = _finalize_bundle(bundle, out_dir, args.format)
    except _VALIDATION_ERRORS as err:
        print(f"validation error: {err}", file=_sys.stderr)
        return 2
    except (UnstableMatrix, NotControllable, ErgoRiskError) as err:
        print(f"solver error: {type(err).__name__}: {err}", file=_sys.stderr)
        return 3
    except OSError as err:
        print(f"i/o error: {err}", file=_sys.stderr)
        return 4

    print(f"{args.command}: wrote {path}")
    if "scalars" in bundle:
        for key, val in sorted(bundle["scalars"].items()):
            print(f"  {key} = {val:.6g}")
    if "error" in bundle:
        print(f"  solver error recorded: {bundle['error']['type']}", file=_sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
