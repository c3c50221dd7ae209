"""Experiment configuration: a single strictly validated JSON document with
nested sections and matrix literals as row-major arrays.

parse -> serialize -> parse is the identity; the configuration hash covers the
canonical serialized form (including the master seed), so identical hashes
imply identical experiments.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import control, risk as risk_mod, system
from .errors import ConfigError, ShapeError
from .serialize import canonical_json, sha256_of

_TOP_KEYS = {"name", "notes", "seed", "system", "cost", "risk", "schedule", "solver", "simulation", "gain"}
_SYSTEM_KEYS = {"matrices", "generator", "noise"}
_MATRIX_KEYS = {"A", "B", "H"}
_GENERATOR_KEYS = {"n", "m", "d", "rho_target", "seed"}
_NOISE_KEYS = {"kind", "nu", "sigma_w", "pool"}
_COST_KEYS = {"Q", "R"}
_RISK_KEYS = {"Qc", "Rc", "budget"}
_BUDGET_KEYS = {"ratio", "absolute"}
_SCHEDULE_KEYS = {"enabled", "period", "magnitude", "direction"}
_SOLVER_KEYS = {"eps", "outer_cap", "inner_cap", "lambda0", "slack_band"}
_SIM_KEYS = {"horizon", "rollouts", "burn_in", "stride"}
_GAIN_KEYS = {"source", "K"}


def _require_keys(section: dict, allowed: set, path: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{path} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path}")


def _matrix(value, path: str, rows: Optional[int] = None, cols: Optional[int] = None) -> list:
    """Validate a row-major matrix literal (or 'identity' with known size)."""
    if value == "identity":
        if rows is None or rows != cols:
            raise ConfigError(f"{path}: 'identity' needs a known square dimension")
        return np.eye(rows).tolist()
    if not isinstance(value, list) or not value or not all(isinstance(r, list) for r in value):
        raise ConfigError(f"{path} must be a non-empty list of rows")
    width = len(value[0])
    for i, r in enumerate(value):
        if len(r) != width:
            raise ShapeError(f"{path} row {i} has {len(r)} entries, expected {width}")
        for j, v in enumerate(r):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{path}[{i}][{j}] must be a number")
    if rows is not None and len(value) != rows:
        raise ShapeError(f"{path} has {len(value)} rows, expected {rows}")
    if cols is not None and width != cols:
        raise ShapeError(f"{path} has {width} columns, expected {cols}")
    return [[float(v) for v in r] for r in value]


def _positive_int(value, path: str, minimum: int = 1) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(f"{path} must be an integer >= {minimum}")
    return value


def _number(value, path: str) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{path} must be a number")
    return float(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Canonical parsed configuration; ``data`` is the defaults-filled document."""

    data: dict

    # -- parsing ---------------------------------------------------------

    @staticmethod
    def parse(raw: dict) -> "ExperimentConfig":
        _require_keys(raw, _TOP_KEYS, "config")
        out: dict = {}
        for key in ("name", "notes"):
            if key in raw:
                if not isinstance(raw[key], str):
                    raise ConfigError(f"{key} must be a string")
                out[key] = raw[key]
        if "seed" not in raw:
            raise ConfigError("config needs a master 'seed'")
        out["seed"] = _positive_int(raw["seed"], "seed", minimum=0)

        out["system"] = ExperimentConfig._parse_system(raw.get("system"))
        n, m, d = ExperimentConfig._dims(out["system"])

        cost = raw.get("cost", {"Q": "identity", "R": "identity"})
        _require_keys(cost, _COST_KEYS, "cost")
        out["cost"] = {
            "Q": _matrix(cost.get("Q", "identity"), "cost.Q", n, n),
            "R": _matrix(cost.get("R", "identity"), "cost.R", m, m),
        }

        risk = raw.get("risk")
        if risk is None:
            raise ConfigError("config needs a 'risk' section with a budget")
        _require_keys(risk, _RISK_KEYS, "risk")
        budget = risk.get("budget")
        if budget is None:
            raise ConfigError("risk.budget is required")
        _require_keys(budget, _BUDGET_KEYS, "risk.budget")
        if len(budget) != 1:
            raise ConfigError("risk.budget must hold exactly one of 'ratio' or 'absolute'")
        key, val = next(iter(budget.items()))
        parsed_risk = {
            "Qc": _matrix(risk.get("Qc", "identity"), "risk.Qc", n, n),
            "budget": {key: _number(val, f"risk.budget.{key}")},
        }
        if "Rc" in risk:
            parsed_risk["Rc"] = _matrix(risk["Rc"], "risk.Rc", m, m)
        out["risk"] = parsed_risk

        schedule = raw.get("schedule", {"enabled": False})
        _require_keys(schedule, _SCHEDULE_KEYS, "schedule")
        enabled = schedule.get("enabled", False)
        if not isinstance(enabled, bool):
            raise ConfigError("schedule.enabled must be a boolean")
        parsed_schedule = {"enabled": enabled}
        if enabled:
            parsed_schedule["period"] = _positive_int(schedule.get("period", 500), "schedule.period")
            parsed_schedule["magnitude"] = _number(schedule.get("magnitude", 1.0), "schedule.magnitude")
            direction = schedule.get("direction")
            if direction is None:
                direction = [1.0] + [0.0] * (n - 1)
            if not isinstance(direction, list) or len(direction) != n:
                raise ShapeError(f"schedule.direction must have {n} entries")
            parsed_schedule["direction"] = [
                _number(v, f"schedule.direction[{i}]") for i, v in enumerate(direction)
            ]
        out["schedule"] = parsed_schedule

        solver = raw.get("solver", {})
        _require_keys(solver, _SOLVER_KEYS, "solver")
        out["solver"] = {
            "eps": _number(solver.get("eps", 1e-8), "solver.eps"),
            "outer_cap": _positive_int(solver.get("outer_cap", 20_000), "solver.outer_cap"),
            "inner_cap": _positive_int(solver.get("inner_cap", 200), "solver.inner_cap"),
            "lambda0": _number(solver.get("lambda0", 1.0), "solver.lambda0"),
        }
        if solver.get("slack_band") is not None:
            out["solver"]["slack_band"] = _number(solver["slack_band"], "solver.slack_band")

        sim = raw.get("simulation", {})
        _require_keys(sim, _SIM_KEYS, "simulation")
        out["simulation"] = {
            "horizon": _positive_int(sim.get("horizon", 10_000), "simulation.horizon"),
            "rollouts": _positive_int(sim.get("rollouts", 200), "simulation.rollouts"),
            "stride": _positive_int(sim.get("stride", 100), "simulation.stride"),
        }
        if sim.get("burn_in") is not None:
            out["simulation"]["burn_in"] = _positive_int(sim["burn_in"], "simulation.burn_in", 0)

        gain = raw.get("gain", {"source": "lqr"})
        _require_keys(gain, _GAIN_KEYS, "gain")
        source = gain.get("source", "lqr")
        if source not in ("lqr", "solved", "explicit"):
            raise ConfigError("gain.source must be one of lqr, solved, explicit")
        parsed_gain = {"source": source}
        if source == "explicit":
            if "K" not in gain:
                raise ConfigError("gain.source 'explicit' needs gain.K")
            parsed_gain["K"] = _matrix(gain["K"], "gain.K", m, n)
        out["gain"] = parsed_gain
        return ExperimentConfig(data=out)

    @staticmethod
    def _parse_system(section) -> dict:
        if section is None:
            raise ConfigError("config needs a 'system' section")
        _require_keys(section, _SYSTEM_KEYS, "system")
        has_matrices = "matrices" in section
        has_generator = "generator" in section
        if has_matrices == has_generator:
            raise ConfigError("system needs exactly one of 'matrices' or 'generator'")
        out: dict = {}
        if has_matrices:
            mats = section["matrices"]
            _require_keys(mats, _MATRIX_KEYS, "system.matrices")
            for key in _MATRIX_KEYS:
                if key not in mats:
                    raise ConfigError(f"system.matrices.{key} is required")
            a = _matrix(mats["A"], "system.matrices.A")
            n = len(a)
            if len(a[0]) != n:
                raise ShapeError("system.matrices.A must be square")
            b = _matrix(mats["B"], "system.matrices.B", rows=n)
            h = _matrix(mats["H"], "system.matrices.H", rows=n)
            out["matrices"] = {"A": a, "B": b, "H": h}
            d = len(h[0])
        else:
            gen = section["generator"]
            _require_keys(gen, _GENERATOR_KEYS, "system.generator")
            out["generator"] = {
                "n": _positive_int(gen.get("n", 4), "system.generator.n"),
                "m": _positive_int(gen.get("m", 2), "system.generator.m"),
                "d": _positive_int(gen.get("d", gen.get("n", 4)), "system.generator.d"),
                "rho_target": _number(gen.get("rho_target", 0.9), "system.generator.rho_target"),
                "seed": _positive_int(gen.get("seed", 0), "system.generator.seed", minimum=0),
            }
            d = out["generator"]["d"]

        noise = section.get("noise", {"kind": "gaussian"})
        _require_keys(noise, _NOISE_KEYS, "system.noise")
        kind = noise.get("kind", "gaussian")
        if kind not in ("gaussian", "student_t", "empirical"):
            raise ConfigError("system.noise.kind must be gaussian, student_t, or empirical")
        parsed_noise = {"kind": kind}
        if kind == "student_t":
            parsed_noise["nu"] = _number(noise.get("nu", 5.0), "system.noise.nu")
        if kind == "empirical":
            pool = noise.get("pool")
            if pool is None:
                raise ConfigError("system.noise.pool is required for empirical noise")
            parsed_noise["pool"] = _matrix(pool, "system.noise.pool", cols=d)
        elif "sigma_w" in noise:
            parsed_noise["sigma_w"] = _matrix(noise["sigma_w"], "system.noise.sigma_w", d, d)
        elif has_matrices:
            raise ConfigError("system.noise.sigma_w is required with explicit matrices")
        out["noise"] = parsed_noise
        return out

    @staticmethod
    def _dims(system_section: dict) -> tuple[int, int, int]:
        if "matrices" in system_section:
            mats = system_section["matrices"]
            return len(mats["A"]), len(mats["B"][0]), len(mats["H"][0])
        gen = system_section["generator"]
        return gen["n"], gen["m"], gen["d"]

    # -- convenience -----------------------------------------------------

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config is not valid JSON: {err}") from err
        return ExperimentConfig.parse(raw)

    def serialize(self) -> str:
        return canonical_json(self.data)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = json.loads(self.serialize())
        data["seed"] = int(seed)
        return ExperimentConfig.parse(data)

    @property
    def master_seed(self) -> int:
        return self.data["seed"]

    @property
    def config_hash(self) -> str:
        return sha256_of(self.data)

    # -- object construction ----------------------------------------------

    def build_noise(self, sigma_w=None) -> system.NoiseModel:
        spec = self.data["system"]["noise"]
        if spec["kind"] == "empirical":
            return system.NoiseModel.empirical(np.array(spec["pool"]))
        if sigma_w is None:
            if "sigma_w" not in spec:
                raise ConfigError("system.noise.sigma_w is required here")
            sigma_w = np.array(spec["sigma_w"])
        if spec["kind"] == "student_t":
            return system.NoiseModel.student_t(spec["nu"], sigma_w)
        return system.NoiseModel.gaussian(sigma_w)

    def build_system(self) -> system.LinearSystem:
        section = self.data["system"]
        if "matrices" in section:
            mats = section["matrices"]
            return system.LinearSystem(
                A=np.array(mats["A"]),
                B=np.array(mats["B"]),
                H=np.array(mats["H"]),
                noise=self.build_noise(),
            )
        gen = section["generator"]
        rng = system.rng_stream(gen["seed"])
        drawn = system.random_stabilizable_system(
            gen["n"], gen["m"], gen["d"], rng, rho_target=gen["rho_target"]
        )
        noise_spec = section["noise"]
        sigma_w = (
            np.array(noise_spec["sigma_w"]) if "sigma_w" in noise_spec else drawn.sigma_w
        )
        return system.LinearSystem(
            A=drawn.A, B=drawn.B, H=drawn.H, noise=self.build_noise(sigma_w)
        )

    def build_cost(self) -> control.QuadraticCost:
        return control.QuadraticCost(
            Q=np.array(self.data["cost"]["Q"]), R=np.array(self.data["cost"]["R"])
        )

    def build_risk(self) -> risk_mod.RiskFunctional:
        rc = self.data["risk"].get("Rc")
        return risk_mod.RiskFunctional(
            Qc=np.array(self.data["risk"]["Qc"]),
            Rc=np.array(rc) if rc is not None else None,
        )

    def build_schedule(self) -> system.DisturbanceSchedule:
        sched = self.data["schedule"]
        if not sched["enabled"]:
            return system.DisturbanceSchedule.off()
        return system.DisturbanceSchedule(
            period=sched["period"],
            magnitude=sched["magnitude"],
            direction=np.array(sched["direction"]),
            enabled=True,
        )

    def resolve_budget(self, gamma_lqr: Optional[float] = None) -> float:
        budget = self.data["risk"]["budget"]
        if "absolute" in budget:
            return budget["absolute"]
        if gamma_lqr is None:
            raise ConfigError("ratio budget needs the LQR risk variance to resolve")
        return budget["ratio"] * gamma_lqr

    def solver_config(self, risk_budget: float):
        from .pdopt import PrimalDualConfig

        s = self.data["solver"]
        return PrimalDualConfig(
            risk_budget=risk_budget,
            eps=s["eps"],
            outer_cap=s["outer_cap"],
            inner_cap=s["inner_cap"],
            lambda0=s["lambda0"],
            slack_band=s.get("slack_band"),
        )
