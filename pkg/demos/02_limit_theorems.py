"""Monte Carlo validation of the risk limit theorems on the scalar benchmark.

Three pictures, written to ./demo_output/:

  1. running averages: S_t / t dies out (law of large numbers) while N_t / t
     settles on the closed-form variance, for gaussian and Student-t(5) noise;
  2. the distribution of S_T / sqrt(T) across 1000 independent rollouts
     against the predicted normal limit;
  3. convergence of the cross-rollout variance toward the closed form as the
     horizon grows.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

import ergorisk as er

OUT = Path(__file__).resolve().parent / "demo_output"
K0 = np.zeros((1, 1))


def benchmark(noise):
    return er.LinearSystem(A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=noise)


def main():
    OUT.mkdir(exist_ok=True)
    risk = er.RiskFunctional(Qc=[[1.0]])
    systems = {
        "gaussian": (benchmark(er.NoiseModel.gaussian([[1.0]])), 10 / 3),
        "student-t(5)": (benchmark(er.NoiseModel.student_t(5.0, [[1.0]])), 28 / 3),
    }

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for (label, (sys, gamma)), color in zip(systems.items(), ("tab:blue", "tab:red")):
        t, s_norm, n_norm = er.running_stats_trace(sys, K0, risk, 100_000, seed=20, stride=100)
        axes[0].plot(t, s_norm / np.sqrt(t), color=color, label=label)
        axes[1].plot(t, n_norm, color=color, label=label)
        axes[1].axhline(gamma, color=color, ls="--", lw=0.8)
        print(f"{label:>13}: N_t/t at t=1e5 -> {n_norm[-1]:.4f} (limit {gamma:.4f})")
    axes[0].set_xlabel("t"), axes[0].set_ylabel("S_t / t"), axes[0].set_xscale("log")
    axes[1].set_xlabel("t"), axes[1].set_ylabel("N_t / t"), axes[1].set_xscale("log")
    axes[0].legend(), axes[1].legend()
    fig.tight_layout()
    fig.savefig(OUT / "running_averages.png", dpi=130)
    plt.close(fig)

    sys, gamma = systems["gaussian"]
    sums = er.normalized_sums(sys, K0, risk, horizon=10_000, rollouts=1000, seed=30)
    z = sums / np.sqrt(gamma)
    ks = stats.kstest(z, "norm")
    print(f"normal shape: KS statistic {ks.statistic:.4f} (1% critical 0.0515), p {ks.pvalue:.3f}")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(z, bins=40, density=True, alpha=0.6, label="normalized risk sums")
    grid = np.linspace(-4, 4, 200)
    ax.plot(grid, stats.norm.pdf(grid), "k--", label="standard normal")
    ax.set_xlabel("S_T / (sqrt(T) gamma)"), ax.legend()
    fig.tight_layout()
    fig.savefig(OUT / "normal_limit.png", dpi=130)
    plt.close(fig)

    horizons = [250, 1000, 4000, 16_000]
    values, errors = [], []
    for horizon in horizons:
        est = er.estimate_clt_variance(sys, K0, risk, horizon, rollouts=600, seed=8)
        values.append(est.value), errors.append(est.stderr)
        print(f"horizon {horizon:>6}: cross-rollout variance {est.value:.4f} +- {est.stderr:.4f}")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(horizons, values, yerr=errors, fmt="o-", capsize=3)
    ax.axhline(gamma, color="k", ls="--", label="closed form")
    ax.set_xscale("log"), ax.set_xlabel("horizon"), ax.set_ylabel("var(S_T / sqrt(T))")
    ax.legend()
    fig.tight_layout()
    fig.savefig(OUT / "variance_convergence.png", dpi=130)
    plt.close(fig)
    print(f"figures written to {OUT}")


if __name__ == "__main__":
    main()
