"""Primal-dual solver for the risk-constrained LQR problem: dual ascent over
the multiplier with the quasi-Newton inner solver, strict-feasibility
screening, and KKT / complementary-slackness certification.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import control, risk as risk_mod, system
from .errors import EvaluationMismatch, NoConvergence


@dataclass(frozen=True)
class PrimalDualConfig:
    """Solver knobs.

    outer_cap bounds the dual-ascent iterations; the theoretical schedule is
    O(ln ln(1/eps) / eps^2), far beyond what the early-stop rule ever needs,
    so the default is a practical cap. slack_band is the constraint-activity
    tolerance (defaults to 1e-3 * risk_budget).
    """

    risk_budget: float
    eps: float = 1e-8
    outer_cap: int = 20_000
    lambda0: float = 1.0
    inner_cap: int = 200
    slack_band: Optional[float] = None
    stall_threshold: float = 1e-6
    stall_steps: int = 5

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if self.outer_cap < 1:
            raise ValueError("outer_cap must be >= 1")
        if not math.isfinite(self.risk_budget):
            raise ValueError("risk_budget must be finite")

    @property
    def band(self) -> float:
        return self.slack_band if self.slack_band is not None else 1e-3 * abs(self.risk_budget)


@dataclass
class KktReport:
    """Primal-dual solver certificate.

    slack is ``variance(K_final) - budget``; cs_residual is the
    complementary-slackness product ``lambda_last * slack``. lambda_avg is the
    running average the dual-ascent schedule returns; lambda_last is the final
    multiplier and is what the certificate products use. trace holds one row
    per outer iteration: (m, lambda, variance, slack, cost, grad_norm,
    inner_iters).
    """

    gain: np.ndarray
    lambda_avg: float
    lambda_last: float
    grad_norm: float
    slack: float
    cs_residual: float
    cost: float
    cond_variance: float
    outer_iters: int
    total_inner_iters: int
    feasible: bool
    short_circuit: bool = False
    trace: list = field(default_factory=list)


@dataclass(frozen=True)
class SlaterReport:
    """Strict-feasibility screening outcome.

    status is one of ``strictly_feasible``, ``boundary``, or
    ``infeasible_evidence`` (the multiplier sweep kept decreasing the risk
    variance yet plateaued above the budget; a heuristic, not a proof).
    """

    status: str
    probes: list  # (multiplier, variance) pairs, multiplier None for the LQR probe
    risk_budget: float
    margin: float

    @property
    def ok(self) -> bool:
        return self.status == "strictly_feasible"


def check_slater(
    sys: system.LinearSystem,
    cost: control.QuadraticCost,
    risk: risk_mod.RiskFunctional,
    risk_budget: float,
    margin: Optional[float] = None,
) -> SlaterReport:
    """Screen for a strictly feasible gain by sweeping inner minimizers.

    Evaluates the risk variance at the LQR gain and at the penalized optimum
    for multipliers 1, 10, ..., 1e4, warm-starting each solve from the last.
    """
    if margin is None:
        margin = 1e-6 * max(1.0, abs(risk_budget))
    lqr = control.lqr_solve(sys, cost)
    probes: list = [(None, risk_mod.asymptotic_conditional_variance(sys, lqr.gain, risk))]
    k = lqr.gain
    for lam in (1.0, 10.0, 100.0, 1e3, 1e4):
        try:
            res = control.minimize_lagrangian(sys, cost, risk, lam, k_init=k, eps=1e-12)
            k = res.policy.gain
        except NoConvergence as err:
            # large multipliers inflate the value-matrix scale until the
            # gradient target sits below the float64 floor; the capped iterate
            # is converged to machine precision and fine for probing
            k = err.last_gain
        probes.append((lam, risk_mod.asymptotic_conditional_variance(sys, k, risk)))

    values = [v for _, v in probes]
    best = min(values)
    if best < risk_budget - margin:
        status = "strictly_feasible"
    elif best <= risk_budget + margin:
        status = "boundary"
    else:
        status = "infeasible_evidence"
    return SlaterReport(status=status, probes=probes, risk_budget=risk_budget, margin=margin)


def primal_dual_solve(
    sys: system.LinearSystem,
    cost: control.QuadraticCost,
    risk: risk_mod.RiskFunctional,
    cfg: PrimalDualConfig,
    k0=None,
) -> KktReport:
    """Dual ascent on the multiplier with exact inner minimization.

    Each outer step re-minimizes the penalized cost (warm-started from the
    current gain) to gradient norm below sqrt(eps), then takes a projected
    subgradient step on the multiplier with step size
    ``(variance(K_0) - budget)^{-1} (m+1)^{-1/2}``. The loop stops early once
    the constraint slack sits inside the activity band and the multiplier
    updates have stalled for several consecutive steps.

    When the unconstrained optimum already meets the budget the solve
    short-circuits: the constraint is inactive and the LQR gain with zero
    multiplier is the exact saddle point.
    """
    budget = cfg.risk_budget
    lqr = control.lqr_solve(sys, cost)
    k_start = lqr.gain if k0 is None else np.asarray(getattr(k0, "gain", k0), dtype=float)

    gamma_unconstrained = risk_mod.asymptotic_conditional_variance(sys, lqr.gain, risk)
    if gamma_unconstrained <= budget:
        policy = control.Policy(lqr.gain, sys, cost, risk)
        grad = control.lagrangian_gradient(sys, cost, risk, policy.gain, 0.0)
        slack = gamma_unconstrained - budget
        cost_val = control.average_cost(sys, cost, policy.gain)
        return KktReport(
            gain=policy.gain,
            lambda_avg=0.0,
            lambda_last=0.0,
            grad_norm=float(np.linalg.norm(grad, "fro")),
            slack=slack,
            cs_residual=0.0,
            cost=cost_val,
            cond_variance=gamma_unconstrained,
            outer_iters=0,
            total_inner_iters=0,
            feasible=True,
            short_circuit=True,
            trace=[],
        )

    gamma0 = risk_mod.asymptotic_conditional_variance(sys, k_start, risk)
    # The schedule's scale needs a positive initial slack; fall back to the
    # LQR slack if a user-supplied warm start is already feasible.
    eta_scale = gamma0 - budget if gamma0 > budget else gamma_unconstrained - budget

    lam = cfg.lambda0
    k = k_start.copy()
    lam_sum = 0.0
    total_inner = 0
    consecutive_stall = 0
    trace: list = []
    slack = gamma0 - budget
    grad_norm = math.inf
    outer_done = 0

    for m in range(cfg.outer_cap):
        res = control.minimize_lagrangian(
            sys, cost, risk, lam, k_init=k, eps=cfg.eps, max_iter=cfg.inner_cap
        )
        k = res.policy.gain
        total_inner += res.iterations
        grad_norm = res.grad_norm
        gamma = risk_mod.asymptotic_conditional_variance(sys, k, risk)
        slack = gamma - budget
        cost_val = control.average_cost(sys, cost, k)
        trace.append((m, lam, gamma, slack, cost_val, grad_norm, res.iterations))

        eta = 1.0 / (eta_scale * math.sqrt(m + 1))
        lam_next = max(0.0, lam + eta * slack)
        update = abs(lam_next - lam)
        lam = lam_next
        lam_sum += lam
        outer_done = m + 1

        if abs(slack) <= cfg.band and update <= cfg.stall_threshold:
            consecutive_stall += 1
        else:
            consecutive_stall = 0
        if consecutive_stall >= cfg.stall_steps:
            break

    lam_avg = lam_sum / outer_done if outer_done else 0.0
    feasible = slack <= cfg.band
    gamma_final = slack + budget
    cost_final = control.average_cost(sys, cost, k)
    return KktReport(
        gain=k,
        lambda_avg=lam_avg,
        lambda_last=lam,
        grad_norm=grad_norm,
        slack=slack,
        cs_residual=lam * slack,
        cost=cost_final,
        cond_variance=gamma_final,
        outer_iters=outer_done,
        total_inner_iters=total_inner,
        feasible=feasible,
        trace=trace,
    )


def dual_function(
    sys: system.LinearSystem,
    cost: control.QuadraticCost,
    risk: risk_mod.RiskFunctional,
    lam: float,
    risk_budget: float,
    eps: float = 1e-12,
    k_init=None,
) -> float:
    """Value of the dual at a multiplier: the penalized cost at its inner
    minimizer, computed as ``tr(P H Sw H') + lam * offset`` and cross-checked
    against the direct Lagrangian evaluation to 1e-8 relative."""
    if lam < 0.0:
        raise ValueError("multiplier must be nonnegative")
    res = control.minimize_lagrangian(sys, cost, risk, lam, k_init=k_init, eps=eps)
    k = res.policy.gain
    p = control.value_matrix(sys, cost, risk, k, lam)
    value = float(np.trace(p @ sys.noise_covariance_injected()))
    value += lam * control.penalty_offset(sys, risk, risk.Qc, risk_budget)
    direct = control.lagrangian(sys, cost, risk, k, lam, risk_budget)
    if abs(value - direct) > 1e-8 * max(1.0, abs(direct)):
        raise EvaluationMismatch(f"dual value routes disagree: {value!r} vs {direct!r}")
    return value


def min_feasible_multiplier(
    sys: system.LinearSystem,
    cost: control.QuadraticCost,
    risk: risk_mod.RiskFunctional,
    risk_budget: float,
    rel_tol: float = 1e-6,
    lam_max: float = 1e8,
    eps: float = 1e-12,
) -> tuple[float, control.Policy]:
    """Smallest multiplier whose inner minimizer meets the risk budget.

    The variance of the inner minimizer is nonincreasing in the multiplier, so
    the threshold is bracketed by growth and narrowed by golden-ratio
    bisection to ``rel_tol`` relative width. Independent of the dual-ascent
    path; used as the certification oracle.

    Returns (multiplier, policy at that multiplier). Raises ValueError when no
    multiplier up to ``lam_max`` reaches the budget.
    """

    def variance_at(lam, k_init=None):
        try:
            gain = control.minimize_lagrangian(sys, cost, risk, lam, k_init=k_init, eps=eps).policy.gain
        except NoConvergence as err:
            gain = err.last_gain  # converged to the float64 floor; see check_slater
        policy = control.Policy(gain, sys, cost, risk)
        return risk_mod.asymptotic_conditional_variance(sys, gain, risk), policy

    gamma0, pol0 = variance_at(0.0)
    if gamma0 <= risk_budget:
        return 0.0, pol0

    lo, hi = 0.0, 1.0
    k_warm = pol0.gain
    while True:
        gamma_hi, pol_hi = variance_at(hi, k_warm)
        k_warm = pol_hi.gain
        if gamma_hi <= risk_budget:
            break
        lo = hi
        hi *= 10.0
        if hi > lam_max:
            raise ValueError(f"no feasible multiplier up to {lam_max:g}")

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    while hi - lo > rel_tol * max(1.0, hi):
        mid = hi - invphi * (hi - lo)
        gamma_mid, pol_mid = variance_at(mid, k_warm)
        k_warm = pol_mid.gain
        if gamma_mid <= risk_budget:
            hi = mid
        else:
            lo = mid
    _, pol = variance_at(hi, k_warm)
    return hi, pol
