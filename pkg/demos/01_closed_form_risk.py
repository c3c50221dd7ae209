"""Closed-form risk arithmetic on a hand-checkable scalar loop.

The loop x_{t+1} = 0.5 x_t + w_t with unit gaussian noise admits exact values
for every quantity in the chain, so this script doubles as a worked example
and a sanity check:

    stationary variance          1 / (1 - 0.25)            = 4/3
    average cost (Q = R = 1)     tr(Q sigma)               = 4/3
    noise quadratic variance     Var(w^2) = E w^4 - 1      = 2
    asymptotic risk variance     4 (4/3 - 1) + 2           = 10/3
    penalized-cost gradient      2 (P a) sigma, P = 4/3    = 16/9

Swapping the gaussian for a unit-variance Student-t(5) changes only the
fourth-moment constant: E w^4 = 9, so the variance becomes 4/3 + 8 = 28/3.
"""

import numpy as np

import ergorisk as er


def main():
    k0 = np.zeros((1, 1))
    cost = er.QuadraticCost(Q=[[1.0]], R=[[1.0]])
    risk = er.RiskFunctional(Qc=[[1.0]])

    print("=== gaussian noise ===")
    sys = er.LinearSystem(
        A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[1.0]])
    )
    rows = [
        ("stationary variance", er.stationary_covariance(sys, k0)[0, 0], 4 / 3),
        ("average cost", er.average_cost(sys, cost, k0), 4 / 3),
        ("noise quad variance", er.quad_variance_gaussian(risk.Qc, sys.H, sys.noise), 2.0),
        ("asymptotic risk variance", er.asymptotic_conditional_variance(sys, k0, risk), 10 / 3),
        ("gradient at K=0, lam=0", er.lagrangian_gradient(sys, cost, risk, k0, 0.0)[0, 0], 16 / 9),
    ]
    for name, got, want in rows:
        print(f"  {name:<26} {got:.12f}   (exact {want:.12f})")

    print("\n=== student-t(5) noise, same covariance ===")
    sys_t = er.LinearSystem(
        A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.student_t(5.0, [[1.0]])
    )
    val = er.asymptotic_conditional_variance(sys_t, k0, risk)
    print(f"  asymptotic risk variance   {val:.12f}   (exact {28 / 3:.12f})")
    est = er.quad_variance_mc(risk.Qc, sys_t.H, sys_t.noise, samples=1_000_000, seed=3)
    print(f"  fourth-moment constant MC  {est.value:.4f} +- {est.stderr:.4f}   (exact 8)")

    print("\n=== a multivariate instance ===")
    rng = er.rng_stream(7)
    plant = er.random_stabilizable_system(4, 2, 4, rng)
    qcost = er.QuadraticCost(Q=np.eye(4), R=np.eye(2))
    qrisk = er.RiskFunctional(Qc=np.eye(4))
    pol = er.lqr_solve(plant, qcost).bound(risk=qrisk)
    print(f"  LQR closed-loop radius     {pol.rho:.4f}")
    print(f"  LQR average cost           {pol.cost_value:.4f}")
    print(f"  LQR risk variance          {pol.cond_variance:.4f}")
    mc = er.estimate_clt_variance(plant, pol.gain, qrisk, horizon=4000, rollouts=400, seed=1)
    print(f"  Monte Carlo CLT variance   {mc.value:.4f} +- {mc.stderr:.4f}")


if __name__ == "__main__":
    main()
