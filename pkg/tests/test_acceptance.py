"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest -v -s tests/test_acceptance.py``).

Every tolerance is pinned here; statistical checks run at fixed seeds.
"""

import json
import os
import time

import numpy as np
import pytest
from scipy import stats as scipy_stats

import ergorisk as er
from ergorisk import cli, matops
from ergorisk.serialize import canonical_json

from conftest import lyapunov_series_oracle, random_psd, random_schur_stable

GAMMA_SCALAR_GAUSSIAN = 10.0 / 3.0
GAMMA_SCALAR_STUDENT_T = 28.0 / 3.0
GOLDEN_K = -0.6180339887498949
WORKERS = min(8, os.cpu_count() or 1)


def report(num: int, ok: bool, detail: str, elapsed: float, budget: float):
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"[ACCEPTANCE {num:02d}] {status} ({elapsed:.1f}s / {budget:.0f}s budget) {detail}")
    assert ok, f"criterion {num}: {detail}"
    assert elapsed < budget, f"criterion {num}: runtime {elapsed:.1f}s over {budget:.0f}s"


def scalar_benchmark():
    sys = er.LinearSystem(
        A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[1.0]])
    )
    cost = er.QuadraticCost(Q=[[1.0]], R=[[1.0]])
    risk = er.RiskFunctional(Qc=[[1.0]])
    return sys, cost, risk


def random_problem(seed, n_max=6, m_max=3):
    rng = er.rng_stream(seed)
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    sys = er.random_stabilizable_system(n, m, n, rng)
    cost = er.QuadraticCost(
        Q=random_psd(rng, n, jitter=0.5), R=random_psd(rng, m, jitter=0.5)
    )
    risk = er.RiskFunctional(Qc=random_psd(rng, n, jitter=0.2))
    return sys, cost, risk


def screened_feasible_instances(count, ratio=0.8, start_seed=100):
    """Random instances strictly feasible at the protocol budget ratio."""
    out = []
    seed = start_seed
    while len(out) < count:
        seed += 1
        try:
            sys, cost, risk = random_problem(seed, n_max=4, m_max=2)
        except er.GeneratorExhausted:
            continue
        try:
            lqr = er.lqr_solve(sys, cost)
            gamma_lqr = er.asymptotic_conditional_variance(sys, lqr.gain, risk)
        except er.ErgoRiskError:
            continue
        budget = ratio * gamma_lqr
        if er.check_slater(sys, cost, risk, budget).status == "strictly_feasible":
            out.append((sys, cost, risk, lqr, gamma_lqr, budget))
    return out


def test_criterion_01_lyapunov_dare_oracles():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst_lyap = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 7))
        a = random_schur_stable(rng, n, rho_max=0.9)
        v = random_psd(rng, n)
        s = er.solve_discrete_lyapunov(a, v)
        oracle = lyapunov_series_oracle(a, v)
        worst_lyap = max(
            worst_lyap, np.linalg.norm(s - oracle, "fro") / np.linalg.norm(oracle, "fro")
        )
    worst_res, all_stable = 0.0, True
    for seed in range(50):
        srng = er.rng_stream(5000 + seed)
        n, m = int(srng.integers(2, 7)), int(srng.integers(1, 4))
        sys = er.random_stabilizable_system(n, m, n, srng)
        q = random_psd(srng, n, jitter=0.5)
        r = random_psd(srng, m, jitter=0.5)
        p = er.solve_dare(sys.A, sys.B, q, r)
        worst_res = max(
            worst_res,
            matops.dare_residual(sys.A, sys.B, q, r, p) / (1 + np.linalg.norm(p, "fro")),
        )
        k = matops.dare_gain(sys.A, sys.B, r, p)
        all_stable &= er.spectral_radius(sys.A + sys.B @ k) < 1.0
    ok = worst_lyap < 1e-8 and worst_res <= 1e-9 and all_stable
    report(
        1, ok,
        f"lyapunov-vs-series worst {worst_lyap:.2e} (<1e-8), "
        f"dare residual worst {worst_res:.2e} (<=1e-9), gains stable: {all_stable}",
        time.time() - t0, 5.0,
    )


def test_criterion_02_scalar_analytic_chain():
    t0 = time.time()
    sys, cost, risk = scalar_benchmark()
    k0 = np.zeros((1, 1))
    checks = {
        "sigma": (er.stationary_covariance(sys, k0)[0, 0], 4.0 / 3.0),
        "cost": (er.average_cost(sys, cost, k0), 4.0 / 3.0),
        "m4": (er.quad_variance_gaussian(risk.Qc, sys.H, sys.noise), 2.0),
        "gamma": (er.asymptotic_conditional_variance(sys, k0, risk), GAMMA_SCALAR_GAUSSIAN),
        "grad": (er.lagrangian_gradient(sys, cost, risk, k0, 0.0)[0, 0], 16.0 / 9.0),
    }
    worst = max(abs(got - want) for got, want in checks.values())
    report(2, worst <= 1e-10, f"worst absolute error {worst:.2e} (<=1e-10)", time.time() - t0, 1.0)


def test_criterion_03_lln_long_run():
    t0 = time.time()
    sys, cost, risk = scalar_benchmark()
    k0 = np.zeros((1, 1))
    horizon = 100_000
    t, s_norm, n_norm = er.running_stats_trace(sys, k0, risk, horizon, seed=20)
    gauss_rel = abs(n_norm[-1] - GAMMA_SCALAR_GAUSSIAN) / GAMMA_SCALAR_GAUSSIAN
    s_over_t = s_norm[-1] / np.sqrt(horizon)
    lln_ok = abs(s_over_t) <= 3.0 * np.sqrt(GAMMA_SCALAR_GAUSSIAN / horizon)

    sys_t = er.LinearSystem(
        A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.student_t(5.0, [[1.0]])
    )
    _, s_norm_t, n_norm_t = er.running_stats_trace(sys_t, k0, risk, horizon, seed=21)
    t_rel = abs(n_norm_t[-1] - GAMMA_SCALAR_STUDENT_T) / GAMMA_SCALAR_STUDENT_T
    lln_t_ok = abs(s_norm_t[-1] / np.sqrt(horizon)) <= 3.0 * np.sqrt(
        GAMMA_SCALAR_STUDENT_T / horizon
    )
    ok = gauss_rel < 0.05 and t_rel < 0.05 and lln_ok and lln_t_ok
    report(
        3, ok,
        f"N_t/t rel err: gaussian {gauss_rel:.3%}, student-t {t_rel:.3%} (<5%); "
        f"|S_t/t| within 3-sigma: {lln_ok and lln_t_ok}",
        time.time() - t0, 30.0,
    )


def test_criterion_04_clt_shape():
    t0 = time.time()
    sys, _, risk = scalar_benchmark()
    k0 = np.zeros((1, 1))
    est = er.estimate_clt_variance(
        sys, k0, risk, horizon=10_000, rollouts=1000, seed=30, workers=WORKERS
    )
    var_rel = abs(est.value - GAMMA_SCALAR_GAUSSIAN) / GAMMA_SCALAR_GAUSSIAN
    sums = er.normalized_sums(
        sys, k0, risk, horizon=10_000, rollouts=1000, seed=30, workers=WORKERS
    )
    ks = scipy_stats.kstest(sums / np.sqrt(GAMMA_SCALAR_GAUSSIAN), "norm").statistic
    ks_crit = 1.628 / np.sqrt(1000)
    ok = var_rel < 0.10 and ks < ks_crit
    report(
        4, ok,
        f"variance rel err {var_rel:.3%} (<10%), KS {ks:.4f} < {ks_crit:.4f}",
        time.time() - t0, 120.0,
    )


def test_criterion_05_gradient_vs_finite_differences():
    t0 = time.time()
    from test_control import finite_difference_gradient, perturbed_stabilizing_gain

    worst = 0.0
    for seed in range(20):
        sys, cost, risk = random_problem(400 + seed)
        rng = np.random.default_rng(seed)
        k = perturbed_stabilizing_gain(sys, cost, rng)
        for lam in (0.0, 0.5, 5.0):
            exact = er.lagrangian_gradient(sys, cost, risk, k, lam)
            fd = finite_difference_gradient(sys, cost, risk, k, lam, 1.0)
            worst = max(worst, np.linalg.norm(exact - fd, "fro") / np.linalg.norm(exact, "fro"))
    report(5, worst <= 1e-4, f"worst relative error {worst:.2e} (<=1e-4)", time.time() - t0, 30.0)


def test_criterion_06_inner_solver_fidelity():
    t0 = time.time()
    golden = er.LinearSystem(
        A=[[1.0]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[1.0]])
    )
    cost1 = er.QuadraticCost(Q=[[1.0]], R=[[1.0]])
    risk1 = er.RiskFunctional(Qc=[[1.0]])
    res = er.minimize_lagrangian(golden, cost1, risk1, 0.0, k_init=[[-0.5]], eps=1e-20)
    golden_err = abs(res.policy.gain[0, 0] - GOLDEN_K)

    worst_gain_err, max_iters = golden_err, res.iterations
    for seed in range(10):
        # normalized family (unit weights, unit-norm noise path): keeps the
        # gradient's float64 evaluation floor well below the 1e-10 target
        rng = er.rng_stream(600 + seed)
        n, m = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        drawn = er.random_stabilizable_system(n, m, n, rng)
        h = drawn.H / np.linalg.norm(drawn.H, 2)
        sys = er.LinearSystem(
            A=drawn.A, B=drawn.B, H=h, noise=er.NoiseModel.gaussian(np.eye(n))
        )
        cost = er.QuadraticCost(Q=np.eye(n), R=np.eye(m))
        qc = random_psd(rng, n, jitter=0.2)
        risk = er.RiskFunctional(Qc=qc / np.trace(qc))
        dare_gain = er.lqr_solve(sys, cost).gain
        res0 = er.minimize_lagrangian(sys, cost, risk, 0.0, eps=1e-20)
        worst_gain_err = max(
            worst_gain_err, np.linalg.norm(res0.policy.gain - dare_gain, "fro")
        )
        for lam in (0.0, 0.5, 5.0):
            res_l = er.minimize_lagrangian(sys, cost, risk, lam, k_init=dare_gain, eps=1e-20)
            max_iters = max(max_iters, res_l.iterations)
            assert res_l.grad_norm < 1e-10
    ok = worst_gain_err < 1e-8 and max_iters <= 20
    report(
        6, ok,
        f"gain error vs Riccati {worst_gain_err:.2e} (<1e-8), "
        f"iterations to 1e-10 gradient: max {max_iters} (<=20)",
        time.time() - t0, 10.0,
    )


@pytest.fixture(scope="module")
def feasible_instances():
    return screened_feasible_instances(20)


def test_criterion_07_kkt_certificates(feasible_instances):
    t0 = time.time()
    worst_gamma_gap, worst_grad = 0.0, 0.0
    all_ok = True
    for sys, cost, risk, lqr, gamma_lqr, budget in feasible_instances:
        rep = er.primal_dual_solve(sys, cost, risk, er.PrimalDualConfig(risk_budget=budget, eps=1e-8))
        worst_grad = max(worst_grad, rep.grad_norm)
        slack_ok = abs(rep.slack) <= 1e-3 * budget or rep.lambda_last <= 1e-6
        _, oracle_pol = er.min_feasible_multiplier(sys, cost, risk, budget)
        gamma_oracle = er.asymptotic_conditional_variance(sys, oracle_pol.gain, risk)
        gap = abs(rep.cond_variance - gamma_oracle) / gamma_oracle
        worst_gamma_gap = max(worst_gamma_gap, gap)
        all_ok &= rep.grad_norm < 1e-4 and slack_ok and gap <= 0.01
    report(
        7, all_ok,
        f"20 instances: worst grad {worst_grad:.2e} (<1e-4), "
        f"worst variance gap vs multiplier oracle {worst_gamma_gap:.3%} (<=1%)",
        time.time() - t0, 300.0,
    )


def test_criterion_08_tradeoff_direction(feasible_instances):
    t0 = time.time()
    direction_ok = True
    for sys, cost, risk, lqr, gamma_lqr, budget in feasible_instances:
        rep = er.primal_dual_solve(sys, cost, risk, er.PrimalDualConfig(risk_budget=budget))
        j_lqr = er.average_cost(sys, cost, lqr.gain)
        direction_ok &= rep.cost >= j_lqr - 1e-9
        direction_ok &= rep.cond_variance <= budget * (1 + 1e-3) < gamma_lqr

    # matched-seed comparison on a heavy-tailed instance with gusts
    rng = er.rng_stream(15)
    sys = er.random_stabilizable_system(4, 2, 4, rng, noise_kind="student_t", nu=5.0)
    cost = er.QuadraticCost(Q=np.eye(4), R=np.eye(2))
    risk = er.RiskFunctional(Qc=np.eye(4))
    lqr = er.lqr_solve(sys, cost)
    gamma_lqr = er.asymptotic_conditional_variance(sys, lqr.gain, risk)
    budget = 0.8 * gamma_lqr
    rep = er.primal_dual_solve(sys, cost, risk, er.PrimalDualConfig(risk_budget=budget))
    sched = er.DisturbanceSchedule(
        period=250,
        magnitude=6.0 * np.sqrt(np.trace(er.stationary_covariance(sys, lqr.gain))),
        direction=[1.0, 0.0, 0.0, 0.0],
        enabled=True,
    )
    seeds = er.derive_seeds(123, 200)
    arm_lqr, arm_star = cli.compare_policies(
        sys, cost, risk, lqr.gain, rep.gain, seeds, 2000, sched, workers=WORKERS
    )
    diff = arm_lqr["n_over_t"] - arm_star["n_over_t"]
    separation = diff.mean() / (diff.std(ddof=1) / np.sqrt(len(diff)))
    # gust resilience is summarized, not asserted
    print(
        f"    gust medians: peak lqr {arm_lqr['peak_norm_median']:.2f} vs "
        f"constrained {arm_star['peak_norm_median']:.2f}; recovery "
        f"{arm_lqr['recovery_steps_median']:.0f} vs {arm_star['recovery_steps_median']:.0f} steps"
    )
    ok = direction_ok and separation >= 3.0
    report(
        8, ok,
        f"cost/variance ordering on all feasible instances: {direction_ok}; "
        f"matched-seed N/T separation {separation:.1f} sigma (>=3)",
        time.time() - t0, 180.0,
    )


def test_criterion_09_strong_duality_gap():
    t0 = time.time()
    family = []
    for a in (1.0, 1.2, 1.5, 2.0):
        sys = er.LinearSystem(
            A=[[a]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[1.0]])
        )
        family.append((sys, er.QuadraticCost(Q=[[1.0]], R=[[1.0]]), er.RiskFunctional(Qc=[[1.0]])))
    for seed in (1, 2):
        family.append(screened_feasible_instances(1, start_seed=700 + 50 * seed)[0][:3])

    worst_gap = 0.0
    for sys, cost, risk in family:
        lqr = er.lqr_solve(sys, cost)
        budget = 0.8 * er.asymptotic_conditional_variance(sys, lqr.gain, risk)
        rep = er.primal_dual_solve(sys, cost, risk, er.PrimalDualConfig(risk_budget=budget, eps=1e-8))
        dual = er.dual_function(sys, cost, risk, rep.lambda_avg, budget)
        worst_gap = max(worst_gap, abs(rep.cost - dual) / rep.cost)
    report(
        9, worst_gap <= 0.05,
        f"worst primal-dual gap {worst_gap:.3%} (<=5%) over {len(family)} instances",
        time.time() - t0, 120.0,
    )


def test_criterion_10_reproducibility(tmp_path):
    t0 = time.time()
    doc = {
        "seed": 42,
        "system": {
            "matrices": {"A": [[1.2]], "B": [[1.0]], "H": [[1.0]]},
            "noise": {"kind": "gaussian", "sigma_w": [[1.0]]},
        },
        "cost": {"Q": [[1.0]], "R": [[1.0]]},
        "risk": {"Qc": [[1.0]], "budget": {"ratio": 0.8}},
        "simulation": {"horizon": 500, "rollouts": 50, "stride": 50},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    texts = []
    for d in ("run_a", "run_b"):
        code = cli.main(["solve", "--config", str(cfg_path), "--out", str(tmp_path / d)])
        assert code == 0
        bundle = json.loads((tmp_path / d / "bundle.json").read_text())
        bundle.pop("timestamp")
        texts.append(canonical_json(bundle))
    report(
        10, texts[0] == texts[1],
        "two solve runs byte-identical after dropping the timestamp",
        time.time() - t0, 60.0,
    )
