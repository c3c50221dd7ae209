import numpy as np
import pytest

import ergorisk as er
from ergorisk import control

from conftest import random_psd

K0 = np.zeros((1, 1))
GOLDEN_K = -0.6180339887498949


def make_instance(seed, n=3, m=2):
    rng = er.rng_stream(seed)
    sys = er.random_stabilizable_system(n, m, n, rng)
    cost = er.QuadraticCost(Q=random_psd(rng, n, jitter=0.5), R=random_psd(rng, m, jitter=0.5))
    risk = er.RiskFunctional(Qc=random_psd(rng, n, jitter=0.2))
    return sys, cost, risk


def perturbed_stabilizing_gain(sys, cost, rng, scale=0.1):
    k = er.lqr_solve(sys, cost).gain
    for _ in range(50):
        trial = k + scale * rng.standard_normal(k.shape)
        if er.spectral_radius(sys.A + sys.B @ trial) < 0.98:
            return trial
        scale *= 0.5
    return k


def finite_difference_gradient(sys, cost, risk, k, lam, budget, step=1e-5):
    grad = np.zeros_like(k)
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            up, down = k.copy(), k.copy()
            up[i, j] += step
            down[i, j] -= step
            grad[i, j] = (
                er.lagrangian(sys, cost, risk, up, lam, budget)
                - er.lagrangian(sys, cost, risk, down, lam, budget)
            ) / (2 * step)
    return grad


class TestStationaryCovariance:
    def test_deadbeat_loop(self):
        rng = er.rng_stream(0)
        sys = er.random_stabilizable_system(3, 3, 3, rng)
        k = np.linalg.solve(sys.B, -sys.A)  # A + BK = 0
        np.testing.assert_allclose(
            er.stationary_covariance(sys, k), sys.H @ sys.sigma_w @ sys.H.T, atol=1e-10
        )

    def test_scalar_benchmark(self, scalar_sys):
        assert er.stationary_covariance(scalar_sys, K0)[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-12)

    def test_monte_carlo_agreement(self):
        sys, cost, _ = make_instance(1)
        k = er.lqr_solve(sys, cost).gain
        batch = er.simulate_batch(sys, k, seeds=[3], horizon=100_000)
        xs = batch.states[0, 1000:]
        emp = xs.T @ xs / len(xs)
        sigma = er.stationary_covariance(sys, k)
        assert np.linalg.norm(emp - sigma, 2) / np.linalg.norm(sigma, 2) < 0.05


class TestAverageCost:
    def test_scalar_benchmark(self, scalar_sys, unit_cost):
        assert er.average_cost(scalar_sys, unit_cost, K0) == pytest.approx(4.0 / 3.0, abs=1e-12)

    def test_lqr_gain_is_optimal(self):
        sys, cost, _ = make_instance(2)
        k_star = er.lqr_solve(sys, cost).gain
        j_star = er.average_cost(sys, cost, k_star)
        rng = np.random.default_rng(0)
        for _ in range(10):
            other = perturbed_stabilizing_gain(sys, cost, rng)
            assert j_star <= er.average_cost(sys, cost, other) + 1e-9

    def test_linear_in_noise_covariance(self, unit_cost):
        base = er.LinearSystem(
            A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[1.0]])
        )
        doubled = er.LinearSystem(
            A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[2.0]])
        )
        assert er.average_cost(doubled, unit_cost, K0) == pytest.approx(
            2.0 * er.average_cost(base, unit_cost, K0), rel=1e-12
        )


class TestValueMatrix:
    def test_unshifted_at_lqr_gain_is_riccati_solution(self):
        sys, cost, risk = make_instance(3)
        p_lqr = er.solve_dare(sys.A, sys.B, cost.Q, cost.R)
        k = er.lqr_solve(sys, cost).gain
        p = er.value_matrix(sys, cost, risk, k, 0.0)
        np.testing.assert_allclose(p, p_lqr, rtol=1e-8)

    def test_scalar_values(self, scalar_sys, unit_cost, unit_risk):
        assert er.value_matrix(scalar_sys, unit_cost, unit_risk, K0, 0.0)[0, 0] == pytest.approx(
            4.0 / 3.0, abs=1e-12
        )
        assert er.value_matrix(scalar_sys, unit_cost, unit_risk, K0, 1.0)[0, 0] == pytest.approx(
            20.0 / 3.0, abs=1e-12
        )

    def test_input_weighted_risk_rejected(self, scalar_sys, unit_cost):
        risk = er.RiskFunctional(Qc=[[1.0]], Rc=[[1.0]])
        with pytest.raises(er.RcNotZero):
            er.value_matrix(scalar_sys, unit_cost, risk, K0, 1.0)


class TestLagrangian:
    def test_reduces_to_cost_at_zero_multiplier(self, scalar_sys, unit_cost, unit_risk):
        assert er.lagrangian(scalar_sys, unit_cost, unit_risk, K0, 0.0, 5.0) == pytest.approx(
            er.average_cost(scalar_sys, unit_cost, K0), abs=1e-12
        )

    def test_scalar_value(self, scalar_sys, unit_cost, unit_risk):
        # J + variance = 4/3 + 10/3 at unit multiplier and zero budget
        assert er.lagrangian(scalar_sys, unit_cost, unit_risk, K0, 1.0, 0.0) == pytest.approx(
            14.0 / 3.0, abs=1e-12
        )

    def test_affine_in_budget(self, scalar_sys, unit_cost, unit_risk):
        lam = 1.7
        l1 = er.lagrangian(scalar_sys, unit_cost, unit_risk, K0, lam, 2.5)
        l0 = er.lagrangian(scalar_sys, unit_cost, unit_risk, K0, lam, 0.0)
        assert l1 - l0 == pytest.approx(-lam * 2.5, rel=1e-12)

    def test_two_routes_agree_on_random_points(self):
        # the cross-check lives inside lagrangian(); reaching the value means
        # both evaluation routes agreed to 1e-9 relative
        rng = np.random.default_rng(5)
        for seed in range(5):
            sys, cost, risk = make_instance(seed)
            k = perturbed_stabilizing_gain(sys, cost, rng)
            for lam in (0.0, 0.5, 5.0):
                val = er.lagrangian(sys, cost, risk, k, lam, 1.0)
                assert np.isfinite(val)

    def test_unstable_gain_rejected(self, golden_sys, unit_cost, unit_risk):
        with pytest.raises(er.UnstableMatrix):
            er.lagrangian(golden_sys, unit_cost, unit_risk, K0, 0.0, 0.0)


class TestGradient:
    def test_scalar_hand_value(self, scalar_sys, unit_cost, unit_risk):
        g = er.lagrangian_gradient(scalar_sys, unit_cost, unit_risk, K0, 0.0)
        assert g[0, 0] == pytest.approx(16.0 / 9.0, abs=1e-12)

    def test_vanishes_at_inner_minimizer(self):
        sys, cost, risk = make_instance(6)
        res = er.minimize_lagrangian(sys, cost, risk, 2.0, eps=1e-18)
        g = er.lagrangian_gradient(sys, cost, risk, res.policy.gain, 2.0)
        assert np.linalg.norm(g, "fro") <= 1e-8

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        sys, cost, risk = make_instance(7, n=3, m=2)
        budget = 1.0
        for lam in (0.0, 0.5, 5.0):
            k = perturbed_stabilizing_gain(sys, cost, rng)
            exact = er.lagrangian_gradient(sys, cost, risk, k, lam)
            fd = finite_difference_gradient(sys, cost, risk, k, lam, budget)
            rel = np.linalg.norm(exact - fd, "fro") / np.linalg.norm(exact, "fro")
            assert rel < 1e-4


class TestInnerSolver:
    def test_recovers_lqr_gain(self):
        sys, cost, risk = make_instance(8)
        res = er.minimize_lagrangian(sys, cost, risk, 0.0, eps=1e-20)
        dare_gain = er.lqr_solve(sys, cost).gain
        assert np.linalg.norm(res.policy.gain - dare_gain, "fro") < 1e-8

    def test_scalar_golden_ratio(self, golden_sys, unit_cost, unit_risk):
        res = er.minimize_lagrangian(
            golden_sys, unit_cost, unit_risk, 0.0, k_init=np.array([[-0.5]]), eps=1e-20
        )
        assert res.policy.gain[0, 0] == pytest.approx(GOLDEN_K, abs=1e-10)

    def test_fast_convergence_from_warm_start(self):
        for seed in range(5):
            sys, cost, risk = make_instance(seed, n=4, m=2)
            warm = er.lqr_solve(sys, cost).gain
            for lam in (0.0, 0.5, 5.0):
                res = er.minimize_lagrangian(sys, cost, risk, lam, k_init=warm, eps=1e-20)
                assert res.iterations <= 20
                assert res.grad_norm < 1e-10

    def test_monotone_descent(self):
        sys, cost, risk = make_instance(11)
        rng = np.random.default_rng(1)
        k0 = perturbed_stabilizing_gain(sys, cost, rng, scale=0.3)
        res = er.minimize_lagrangian(
            sys, cost, risk, 1.0, k_init=k0, eps=1e-18, track_values=True
        )
        values = np.array(res.values)
        assert np.all(np.diff(values) <= 1e-12 * np.maximum(1.0, np.abs(values[:-1])))

    def test_fixed_point_consistency(self):
        # the converged gain reproduces itself through the value-matrix formula
        sys, cost, risk = make_instance(12)
        res = er.minimize_lagrangian(sys, cost, risk, 3.0, eps=1e-20)
        k = res.policy.gain
        p = er.value_matrix(sys, cost, risk, k, 3.0)
        k_again = -np.linalg.solve(cost.R + sys.B.T @ p @ sys.B, sys.B.T @ p @ sys.A)
        assert np.linalg.norm(k - k_again, "fro") < 1e-8

    def test_unstable_start_rejected(self, golden_sys, unit_cost, unit_risk):
        with pytest.raises(er.UnstableMatrix):
            er.minimize_lagrangian(golden_sys, unit_cost, unit_risk, 0.0, k_init=K0)

    def test_gradient_domination_constant_finite(self):
        sys, cost, risk = make_instance(13)
        lam = 0.5
        best = er.minimize_lagrangian(sys, cost, risk, lam, eps=1e-20)
        l_star = er.lagrangian(sys, cost, risk, best.policy.gain, lam, 0.0)
        rng = np.random.default_rng(2)
        ratios = []
        for _ in range(20):
            k = perturbed_stabilizing_gain(sys, cost, rng, scale=0.2)
            gap = er.lagrangian(sys, cost, risk, k, lam, 0.0) - l_star
            gnorm2 = np.linalg.norm(er.lagrangian_gradient(sys, cost, risk, k, lam), "fro") ** 2
            if gnorm2 > 1e-16:
                ratios.append(gap / gnorm2)
        c = max(ratios)
        assert np.isfinite(c) and c < 1e6


class TestLqrSolve:
    def test_scalar_golden_ratio(self, golden_sys, unit_cost):
        pol = er.lqr_solve(golden_sys, unit_cost)
        assert pol.gain[0, 0] == pytest.approx(GOLDEN_K, abs=1e-10)
        assert pol.is_stabilizing

    def test_expensive_control_shrinks_gain(self):
        sys = er.LinearSystem(
            A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[1.0]])
        )
        cost = er.QuadraticCost(Q=[[1.0]], R=[[1e6]])
        assert abs(er.lqr_solve(sys, cost).gain[0, 0]) <= 1e-3

    def test_shrunken_gain_costs_more(self, golden_sys, unit_cost):
        k = er.lqr_solve(golden_sys, unit_cost).gain
        assert er.average_cost(golden_sys, unit_cost, k) <= er.average_cost(
            golden_sys, unit_cost, 0.99 * k
        )


class TestPolicyCaching:
    def test_cached_values_satisfy_definitions(self, scalar_sys, unit_cost, unit_risk):
        pol = er.Policy(K0, scalar_sys, unit_cost, unit_risk)
        assert pol.rho == pytest.approx(0.5)
        assert pol.sigma[0, 0] == pytest.approx(4.0 / 3.0)
        assert pol.cost_value == pytest.approx(4.0 / 3.0)
        assert pol.cond_variance == pytest.approx(10.0 / 3.0)

    def test_gain_is_frozen(self, scalar_sys):
        pol = er.Policy(K0, scalar_sys)
        with pytest.raises(ValueError):
            pol.gain[0, 0] = 1.0


class TestLagrangianPoint:
    def test_fields_are_mutually_consistent(self, scalar_sys, unit_cost, unit_risk):
        point = er.lagrangian_point(scalar_sys, unit_cost, unit_risk, K0, 1.0, 0.0)
        assert point.value == pytest.approx(14.0 / 3.0, abs=1e-12)
        assert point.value_matrix[0, 0] == pytest.approx(20.0 / 3.0, abs=1e-12)
        assert point.grad_norm == pytest.approx(np.linalg.norm(point.grad, "fro"))
        np.testing.assert_allclose(
            point.grad,
            er.lagrangian_gradient(scalar_sys, unit_cost, unit_risk, K0, 1.0),
        )
