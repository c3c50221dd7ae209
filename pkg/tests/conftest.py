import numpy as np
import pytest

import ergorisk as er


@pytest.fixture(scope="session")
def scalar_sys():
    """Closed loop a_K = 0.5 under K = 0, unit gaussian noise through H = 1."""
    return er.LinearSystem(
        A=[[0.5]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[1.0]])
    )


@pytest.fixture(scope="session")
def golden_sys():
    """a = b = 1 instance whose LQR gain is the negative inverse golden ratio."""
    return er.LinearSystem(
        A=[[1.0]], B=[[1.0]], H=[[1.0]], noise=er.NoiseModel.gaussian([[1.0]])
    )


@pytest.fixture(scope="session")
def unit_cost():
    return er.QuadraticCost(Q=[[1.0]], R=[[1.0]])


@pytest.fixture(scope="session")
def unit_risk():
    return er.RiskFunctional(Qc=[[1.0]])


def random_schur_stable(rng, n, rho_max=0.9, rho_min=0.3):
    """Random matrix rescaled to a spectral radius in [rho_min, rho_max]."""
    a = rng.standard_normal((n, n))
    rho = er.spectral_radius(a)
    if rho == 0.0:
        a[0, 0] = 0.5
        rho = 0.5
    return a * (rng.uniform(rho_min, rho_max) / rho)


def random_psd(rng, n, jitter=0.0):
    g = rng.standard_normal((n, n))
    return g @ g.T / n + jitter * np.eye(n)


def lyapunov_series_oracle(a, v, tol=1e-12):
    """Brute-force truncated series sum_{k=0}^{N} A^k V A'^k with
    rho(A)^{2N} < tol."""
    rho = er.spectral_radius(a)
    n_terms = int(np.ceil(np.log(tol) / (2.0 * np.log(rho)))) if rho > 0 else 1
    total = v.copy()
    term = v.copy()
    for _ in range(n_terms):
        term = a @ term @ a.T
        total += term
    return total
