"""Policy-space quantities: stationary closed-loop covariance, average cost,
the multiplier-shifted value matrix, the Lagrangian of the risk-constrained
problem and its exact gradient, the quasi-Newton (policy-iteration) inner
solver, and the baseline LQR solution.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import matops, risk as risk_mod, system
from .errors import (
    AssumptionViolation,
    EvaluationMismatch,
    NoConvergence,
    RcNotZero,
    ShapeError,
    StabilityLost,
    UnstableMatrix,
)


@dataclass(frozen=True)
class QuadraticCost:
    """Performance weights: positive definite Q and R."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        q = matops.symmetrize(matops.as_square(self.Q, "Q"))
        r = matops.symmetrize(matops.as_square(self.R, "R"))
        if np.linalg.eigvalsh(q)[0] <= 0.0:
            raise ShapeError("Q must be positive definite")
        if np.linalg.eigvalsh(r)[0] <= 0.0:
            raise ShapeError("R must be positive definite")
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "R", r)

    def closed_loop_weight(self, k) -> np.ndarray:
        k = np.asarray(getattr(k, "gain", k), dtype=float)
        return self.Q + k.T @ self.R @ k


class Policy:
    """A feedback gain with lazily cached closed-loop facts.

    The gain array is frozen; caches never go stale. Binding a system (and
    optionally cost / risk weights) enables the derived quantities.
    """

    def __init__(self, gain, sys=None, cost=None, risk=None):
        g = np.atleast_2d(np.asarray(getattr(gain, "gain", gain), dtype=float)).copy()
        g.flags.writeable = False
        self.gain = g
        self.sys = sys
        self.cost = cost
        self.risk = risk
        self._cache: dict = {}

    def bound(self, sys=None, cost=None, risk=None) -> "Policy":
        return Policy(self.gain, sys or self.sys, cost or self.cost, risk or self.risk)

    def _need(self, attr):
        if getattr(self, attr) is None:
            raise ValueError(f"policy has no bound {attr}")
        return getattr(self, attr)

    @property
    def closed_loop(self) -> np.ndarray:
        sys = self._need("sys")
        return sys.A + sys.B @ self.gain

    @property
    def rho(self) -> float:
        if "rho" not in self._cache:
            self._cache["rho"] = matops.spectral_radius(self.closed_loop)
        return self._cache["rho"]

    @property
    def is_stabilizing(self) -> bool:
        return self.rho < 1.0 - matops.STABILITY_TOL

    @property
    def sigma(self) -> np.ndarray:
        """Stationary closed-loop state covariance."""
        if "sigma" not in self._cache:
            self._cache["sigma"] = stationary_covariance(self._need("sys"), self.gain)
        return self._cache["sigma"]

    @property
    def cost_value(self) -> float:
        if "cost" not in self._cache:
            self._cache["cost"] = float(
                np.trace(self._need("cost").closed_loop_weight(self.gain) @ self.sigma)
            )
        return self._cache["cost"]

    @property
    def cond_variance(self) -> float:
        """Closed-form asymptotic conditional risk variance of this loop."""
        if "gamma" not in self._cache:
            self._cache["gamma"] = risk_mod.asymptotic_conditional_variance(
                self._need("sys"), self.gain, self._need("risk")
            )
        return self._cache["gamma"]

    def __repr__(self):
        return f"Policy(gain={self.gain!r})"


def _gain(k, sys: system.LinearSystem) -> np.ndarray:
    return np.asarray(getattr(k, "gain", k), dtype=float).reshape(sys.m, sys.n)


def stationary_covariance(sys: system.LinearSystem, k) -> np.ndarray:
    """Unique solution of ``S = A_K S A_K' + H Sw H'`` for a stabilizing gain."""
    a_k = sys.A + sys.B @ _gain(k, sys)
    return matops.solve_discrete_lyapunov(a_k, sys.noise_covariance_injected())


def average_cost(sys: system.LinearSystem, cost: QuadraticCost, k) -> float:
    """Long-run average quadratic cost ``tr((Q + K'RK) S_K)``."""
    kmat = _gain(k, sys)
    return float(np.trace(cost.closed_loop_weight(kmat) @ stationary_covariance(sys, kmat)))


def _risk_injection(sys: system.LinearSystem, risk: risk_mod.RiskFunctional) -> np.ndarray:
    """The rank-limited state weight ``4 Qc H Sw H' Qc`` the multiplier scales."""
    hswh = sys.noise_covariance_injected()
    return 4.0 * risk.Qc @ hswh @ risk.Qc


def _require_state_only(risk: risk_mod.RiskFunctional):
    if not risk.is_state_only:
        raise RcNotZero("the optimizer branch needs a state-only risk functional (Rc = 0)")


def value_matrix(
    sys: system.LinearSystem,
    cost: QuadraticCost,
    risk: risk_mod.RiskFunctional,
    k,
    lam: float,
) -> np.ndarray:
    """Multiplier-shifted value matrix: the unique PD solution of
    ``P = A_K' P A_K + Q + K'RK + 4 lam Qc H Sw H' Qc``."""
    _require_state_only(risk)
    if lam < 0.0:
        raise ValueError("multiplier must be nonnegative")
    kmat = _gain(k, sys)
    a_k = sys.A + sys.B @ kmat
    rhs = cost.closed_loop_weight(kmat) + lam * _risk_injection(sys, risk)
    return matops.solve_discrete_lyapunov(a_k.T, rhs)


def penalty_offset(
    sys: system.LinearSystem, risk: risk_mod.RiskFunctional, qck, risk_budget: float
) -> float:
    """State-independent part of the penalized cost:
    ``-4 tr((Qck H Sw H')^2) + m4 - budget``."""
    hswh = sys.noise_covariance_injected()
    qh = np.asarray(qck, dtype=float) @ hswh
    _, m4 = risk_mod.noise_moment_constants(qck, sys.H, sys.noise)
    return float(-4.0 * np.trace(qh @ qh) + m4 - risk_budget)


def lagrangian(
    sys: system.LinearSystem,
    cost: QuadraticCost,
    risk: risk_mod.RiskFunctional,
    k,
    lam: float,
    risk_budget: float,
) -> float:
    """Penalized average cost ``J(K) + lam (variance(K) - budget)``.

    Evaluated through two algebraically equivalent routes (the definition and
    its trace expansion) which must agree to 1e-9 relative; disagreement
    raises :class:`EvaluationMismatch`.
    """
    kmat = _gain(k, sys)
    a_k = sys.A + sys.B @ kmat
    if not matops.is_schur_stable(a_k):
        raise UnstableMatrix("Lagrangian defined only on the stabilizing set")
    sigma_k = matops.solve_discrete_lyapunov(a_k, sys.noise_covariance_injected())
    qck = risk.closed_loop_weight(kmat)
    hswh = sys.noise_covariance_injected()
    q_k = cost.closed_loop_weight(kmat)
    _, m4 = risk_mod.noise_moment_constants(qck, sys.H, sys.noise)

    gamma = 4.0 * float(np.trace(qck @ hswh @ qck @ (sigma_k - hswh))) + m4
    direct = float(np.trace(q_k @ sigma_k)) + lam * (gamma - risk_budget)

    shifted = q_k + 4.0 * lam * qck @ hswh @ qck
    qh = qck @ hswh
    offset = -4.0 * float(np.trace(qh @ qh)) + m4 - risk_budget
    expanded = float(np.trace(shifted @ sigma_k)) + lam * offset

    if abs(direct - expanded) > 1e-9 * max(1.0, abs(direct)):
        raise EvaluationMismatch(
            f"Lagrangian routes disagree: {direct!r} vs {expanded!r}"
        )
    return direct


def lagrangian_gradient(
    sys: system.LinearSystem,
    cost: QuadraticCost,
    risk: risk_mod.RiskFunctional,
    k,
    lam: float,
) -> np.ndarray:
    """Exact policy gradient ``2 (R K + B' P A_K) S_K`` of the penalized cost;
    vanishes exactly at the inner minimizer."""
    kmat = _gain(k, sys)
    a_k = sys.A + sys.B @ kmat
    p = value_matrix(sys, cost, risk, kmat, lam)
    sigma_k = matops.solve_discrete_lyapunov(a_k, sys.noise_covariance_injected())
    return 2.0 * (cost.R @ kmat + sys.B.T @ p @ a_k) @ sigma_k


@dataclass(frozen=True)
class LagrangianPoint:
    """Everything about the penalized cost at one (gain, multiplier) pair."""

    gain: np.ndarray
    lam: float
    value_matrix: np.ndarray
    value: float
    grad: np.ndarray
    grad_norm: float


def lagrangian_point(
    sys: system.LinearSystem,
    cost: QuadraticCost,
    risk: risk_mod.RiskFunctional,
    k,
    lam: float,
    risk_budget: float,
) -> LagrangianPoint:
    kmat = _gain(k, sys)
    p = value_matrix(sys, cost, risk, kmat, lam)
    grad = lagrangian_gradient(sys, cost, risk, kmat, lam)
    return LagrangianPoint(
        gain=kmat,
        lam=lam,
        value_matrix=p,
        value=lagrangian(sys, cost, risk, kmat, lam, risk_budget),
        grad=grad,
        grad_norm=float(np.linalg.norm(grad, "fro")),
    )


@dataclass
class MinimizeResult:
    """Outcome of the inner quasi-Newton solve.

    ``values``, ``grad_norms`` and ``rhos`` trace the penalized cost, gradient
    norm and closed-loop spectral radius across accepted iterates (values and
    rhos only when tracking is on).
    """

    policy: Policy
    iterations: int
    grad_norm: float
    grad_norms: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rhos: list = field(default_factory=list)


def minimize_lagrangian(
    sys: system.LinearSystem,
    cost: QuadraticCost,
    risk: risk_mod.RiskFunctional,
    lam: float,
    k_init=None,
    eps: float = 1e-8,
    max_iter: int = 200,
    track_values: bool = False,
) -> MinimizeResult:
    """Minimize the penalized cost over stabilizing gains for a fixed multiplier.

    Runs the Riccati policy-iteration update in quasi-Newton form: the search
    direction is ``G = -(R + B'PB)^{-1} grad S_K^{-1}`` with a fixed half step,
    which lands each iterate exactly on the policy-improvement gain and
    converges quadratically. Every iterate is asserted stabilizing.

    Args:
        lam: nonnegative multiplier weighting the risk variance.
        k_init: stabilizing warm start; defaults to the plain LQR gain.
        eps: outer tolerance; the loop exits once the gradient Frobenius norm
            drops below sqrt(eps).

    Raises:
        StabilityLost: an iterate left the stabilizing set (carries the last
            safe gain).
        NoConvergence: iteration cap reached.
    """
    _require_state_only(risk)
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    kmat = lqr_solve(sys, cost).gain.copy() if k_init is None else _gain(k_init, sys).copy()
    if not matops.is_schur_stable(sys.A + sys.B @ kmat):
        raise UnstableMatrix("inner solver needs a stabilizing warm start")

    hswh = sys.noise_covariance_injected()
    risk_shift = lam * _risk_injection(sys, risk)
    tol = np.sqrt(eps)
    grad_norms: list[float] = []
    values: list[float] = []
    rhos: list[float] = []

    for it in range(max_iter + 1):
        a_k = sys.A + sys.B @ kmat
        sigma_k = matops.solve_discrete_lyapunov(a_k, hswh)
        p = matops.solve_discrete_lyapunov(a_k.T, cost.closed_loop_weight(kmat) + risk_shift)
        grad = 2.0 * (cost.R @ kmat + sys.B.T @ p @ a_k) @ sigma_k
        gnorm = float(np.linalg.norm(grad, "fro"))
        grad_norms.append(gnorm)
        if track_values:
            shifted = cost.closed_loop_weight(kmat) + risk_shift
            values.append(float(np.trace(shifted @ sigma_k)))
            rhos.append(matops.spectral_radius(a_k))
        if gnorm < tol:
            return MinimizeResult(
                policy=Policy(kmat, sys, cost, risk),
                iterations=it,
                grad_norm=gnorm,
                grad_norms=grad_norms,
                values=values,
                rhos=rhos,
            )
        if it == max_iter:
            break
        try:
            half = scipy.linalg.solve(cost.R + sys.B.T @ p @ sys.B, grad, assume_a="pos")
            direction = -scipy.linalg.solve(sigma_k, half.T, assume_a="pos").T
        except np.linalg.LinAlgError as err:
            raise AssumptionViolation(
                "stationary covariance not positive definite; H must be full row rank"
            ) from err
        candidate = kmat + 0.5 * direction
        if not matops.is_schur_stable(sys.A + sys.B @ candidate):
            raise StabilityLost(
                f"iterate {it + 1} left the stabilizing set", last_gain=kmat
            )
        kmat = candidate
    raise NoConvergence(
        f"gradient norm {gnorm:.3g} after {max_iter} iterations (target {tol:.3g})",
        last_gain=kmat,
        grad_norm=gnorm,
    )


def lqr_solve(sys: system.LinearSystem, cost: QuadraticCost) -> Policy:
    """Unconstrained infinite-horizon LQR gain from the Riccati solution."""
    p = matops.solve_dare(sys.A, sys.B, cost.Q, cost.R)
    return Policy(matops.dare_gain(sys.A, sys.B, cost.R, p), sys, cost)
