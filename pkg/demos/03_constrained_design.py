"""Risk-constrained design on a random instance, end to end.

Walks the full solver path: feasibility screening, dual ascent with the
quasi-Newton inner loop, the KKT certificate, and an independent check of the
returned multiplier against golden-ratio bisection. Finishes with the
cost-versus-risk frontier traced over a grid of budgets.

Writes dual-ascent and frontier plots to ./demo_output/.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

import ergorisk as er

OUT = Path(__file__).resolve().parent / "demo_output"


def main():
    OUT.mkdir(exist_ok=True)
    rng = er.rng_stream(15)
    plant = er.random_stabilizable_system(4, 2, 4, rng, noise_kind="student_t", nu=5.0)
    cost = er.QuadraticCost(Q=np.eye(4), R=np.eye(2))
    risk = er.RiskFunctional(Qc=np.eye(4))

    lqr = er.lqr_solve(plant, cost)
    gamma_lqr = er.asymptotic_conditional_variance(plant, lqr.gain, risk)
    j_lqr = er.average_cost(plant, cost, lqr.gain)
    budget = 0.8 * gamma_lqr
    print(f"LQR: cost {j_lqr:.2f}, risk variance {gamma_lqr:.2f}; budget {budget:.2f}")

    slater = er.check_slater(plant, cost, risk, budget)
    print(f"feasibility sweep: {slater.status}")
    for lam, val in slater.probes:
        tag = "LQR" if lam is None else f"lam={lam:g}"
        print(f"  {tag:>9}: variance {val:.2f}")

    report = er.primal_dual_solve(plant, cost, risk, er.PrimalDualConfig(risk_budget=budget))
    print(
        f"solved in {report.outer_iters} outer / {report.total_inner_iters} inner iterations: "
        f"cost {report.cost:.2f} (+{100 * (report.cost / j_lqr - 1):.2f}%), "
        f"variance {report.cond_variance:.2f} ({report.cond_variance / gamma_lqr:.0%} of LQR), "
        f"multiplier {report.lambda_last:.4f}, slack {report.slack:.2e}"
    )
    lam_star, _ = er.min_feasible_multiplier(plant, cost, risk, budget)
    dual = er.dual_function(plant, risk=risk, cost=cost, lam=report.lambda_avg, risk_budget=budget)
    print(f"bisection multiplier {lam_star:.4f}; duality gap {abs(report.cost - dual) / report.cost:.2e}")

    trace = np.array([(m, lam, slack) for m, lam, _, slack, *_ in report.trace])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(trace[:, 0], trace[:, 1])
    axes[0].axhline(lam_star, color="k", ls="--", label="bisection value")
    axes[0].set_xlabel("outer iteration"), axes[0].set_ylabel("multiplier"), axes[0].legend()
    axes[1].semilogy(trace[:, 0], np.abs(trace[:, 2]) / budget)
    axes[1].set_xlabel("outer iteration"), axes[1].set_ylabel("|slack| / budget")
    fig.tight_layout()
    fig.savefig(OUT / "dual_ascent.png", dpi=130)
    plt.close(fig)

    ratios = np.linspace(0.55, 1.0, 10)
    costs, variances = [], []
    for ratio in ratios:
        rep = er.primal_dual_solve(
            plant, cost, risk, er.PrimalDualConfig(risk_budget=ratio * gamma_lqr)
        )
        costs.append(rep.cost), variances.append(rep.cond_variance)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(variances, costs, "o-")
    ax.plot([gamma_lqr], [j_lqr], "r*", ms=12, label="plain LQR")
    ax.set_xlabel("risk variance"), ax.set_ylabel("average cost"), ax.legend()
    fig.tight_layout()
    fig.savefig(OUT / "tradeoff_frontier.png", dpi=130)
    plt.close(fig)
    print(f"figures written to {OUT}")


if __name__ == "__main__":
    main()
