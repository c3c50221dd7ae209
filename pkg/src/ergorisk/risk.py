"""Ergodic-risk machinery: per-step risk increments, their running sums,
the closed-form asymptotic conditional variance, and Monte Carlo estimators
that validate the limit behavior.

For a quadratic risk functional ``g(x, u) = x' Qc x + u' Rc u`` along the
closed loop ``x_next = A_K x + H w``, the one-step risk increment is the part
of ``g`` that is unpredictable given the current state:

    C = x_next' Qck x_next - (A_K x)' Qck (A_K x) - tr(Qck H Sw H'),

a martingale difference with conditional second moment

    E[C^2 | x] = 4 x' A_K' Qck H Sw H' Qck A_K x + 4 m3' Qck A_K x + m4,

where ``m3`` and ``m4`` are third/fourth-moment constants of the noise.
The time averages of these conditional moments converge to the closed form

    4 tr(Qck H Sw H' Qck (S_K - H Sw H')) + m4,

with ``S_K`` the stationary closed-loop covariance.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import matops, system
from .errors import NotControllable, ShapeError, UnstableMatrix, WrongNoiseModel


@dataclass(frozen=True)
class RiskFunctional:
    """Quadratic risk weights: PSD state weight Qc and PSD input weight Rc."""

    Qc: np.ndarray
    Rc: Optional[np.ndarray] = None

    def __post_init__(self):
        qc = matops.symmetrize(matops.as_square(self.Qc, "Qc"))
        if np.linalg.eigvalsh(qc)[0] < -1e-10 * max(1.0, np.abs(qc).max()):
            raise ShapeError("Qc must be positive semidefinite")
        object.__setattr__(self, "Qc", qc)
        if self.Rc is not None:
            rc = matops.symmetrize(matops.as_square(self.Rc, "Rc"))
            if np.linalg.eigvalsh(rc)[0] < -1e-10 * max(1.0, np.abs(rc).max()):
                raise ShapeError("Rc must be positive semidefinite")
            object.__setattr__(self, "Rc", rc)

    @property
    def is_state_only(self) -> bool:
        return self.Rc is None or not np.any(self.Rc)

    def closed_loop_weight(self, k) -> np.ndarray:
        """Effective state weight ``Qck = Qc + K' Rc K`` under ``u = K x``."""
        if self.is_state_only:
            return self.Qc
        k = np.asarray(getattr(k, "gain", k), dtype=float)
        return self.Qc + k.T @ self.Rc @ k

    def value(self, x, u) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        v = float(x @ self.Qc @ x)
        if not self.is_state_only:
            u = np.asarray(u, dtype=float).reshape(-1)
            v += float(u @ self.Rc @ u)
        return v


@dataclass(frozen=True)
class MomentEstimate:
    """Monte Carlo estimate of a noise moment constant."""

    value: object  # float or ndarray
    stderr: object
    samples: int


@dataclass(frozen=True)
class VarianceEstimate:
    """An asymptotic-variance figure with its provenance.

    method is one of ``analytic``, ``mc_conditional`` (time-average of
    conditional second moments on one long rollout), or ``mc_clt_variance``
    (cross-rollout sample variance of the normalized risk sum).
    """

    value: float
    stderr: float
    method: str
    samples: int


def _quad_form_weight(qck, h) -> np.ndarray:
    """Noise-space weight ``H' Qck H`` of the risk quadratic form."""
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h.reshape(-1, 1)
    return h.T @ np.asarray(qck, dtype=float) @ h


def quad_variance_gaussian(qck, h, model: system.NoiseModel) -> float:
    """Variance of ``tr(Qck H (w w' - Sw) H')`` for gaussian noise.

    Equals ``2 tr((H' Qck H Sw)^2)``, the classical gaussian quadratic-form
    variance.
    """
    if model.kind != "gaussian":
        raise WrongNoiseModel(f"gaussian formula called with {model.kind!r} noise")
    ms = _quad_form_weight(qck, h) @ model.sigma_w
    return float(2.0 * np.trace(ms @ ms))


def _quad_variance_student_t(qck, h, model: system.NoiseModel) -> float:
    # Elliptical fourth-moment identity with excess-kurtosis parameter
    # 2/(nu-4):  E[(w'Mw)^2] = (nu-2)/(nu-4) [tr(M Sw)^2 + 2 tr((M Sw)^2)].
    nu = model.nu
    ms = _quad_form_weight(qck, h) @ model.sigma_w
    t1 = np.trace(ms) ** 2
    t2 = np.trace(ms @ ms)
    return float((2.0 / (nu - 4.0)) * t1 + (2.0 * (nu - 2.0) / (nu - 4.0)) * t2)


def _pool_quad_samples(qck, h, model: system.NoiseModel, w: np.ndarray) -> np.ndarray:
    mt = _quad_form_weight(qck, h)
    center = np.trace(mt @ model.sigma_w)
    return np.einsum("ti,ij,tj->t", w, mt, w) - center


def noise_moment_constants(qck, h, model: system.NoiseModel) -> tuple[np.ndarray, float]:
    """Exact third/fourth moment constants (m3 vector, m4 scalar) of the model.

    m4 is the variance of the centered risk quadratic form of the noise; m3 is
    its cross moment with the injected noise vector ``H w``. Both vanish to
    zero / are available in closed form for the symmetric families; for
    empirical pools they are exact averages over the pool.
    """
    h2 = np.asarray(h, dtype=float)
    if h2.ndim == 1:
        h2 = h2.reshape(-1, 1)
    n = h2.shape[0]
    if model.kind == "gaussian":
        return np.zeros(n), quad_variance_gaussian(qck, h, model)
    if model.kind == "student_t":
        return np.zeros(n), _quad_variance_student_t(qck, h, model)
    q = _pool_quad_samples(qck, h, model, model.pool)
    m4 = float(np.mean(q**2))
    m3 = (model.pool @ h2.T * q[:, None]).mean(axis=0)
    return m3, m4


def quad_variance_mc(qck, h, model: system.NoiseModel, samples: int, seed: int = 0) -> MomentEstimate:
    """Monte Carlo counterpart of the fourth-moment constant, with standard error.

    Deterministic under a fixed seed; degenerates to (0, 0) when Qck = 0.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    w = model.sample(system.rng_stream(seed), samples)
    q2 = _pool_quad_samples(qck, h, model, w) ** 2
    return MomentEstimate(
        value=float(q2.mean()),
        stderr=float(q2.std(ddof=1) / math.sqrt(samples)),
        samples=samples,
    )


def cross_moment_mc(qck, h, model: system.NoiseModel, samples: int, seed: int = 0) -> MomentEstimate:
    """Monte Carlo estimate of ``E[H w tr(Qck H (w w' - Sw) H')]`` (a state-space
    vector); exactly zero in expectation for the symmetric noise families."""
    if samples < 2:
        raise ValueError("samples must be >= 2")
    h2 = np.asarray(h, dtype=float)
    if h2.ndim == 1:
        h2 = h2.reshape(-1, 1)
    w = model.sample(system.rng_stream(seed), samples)
    q = _pool_quad_samples(qck, h, model, w)
    terms = (w @ h2.T) * q[:, None]
    return MomentEstimate(
        value=terms.mean(axis=0),
        stderr=terms.std(axis=0, ddof=1) / math.sqrt(samples),
        samples=samples,
    )


@dataclass(frozen=True)
class RiskRunningStats:
    """Running sums of risk increments and their conditional second moments.

    ``cum_increment`` is the sum of realized increments C_s, ``cum_cond_var``
    the sum of conditional variances E[C_s^2 | past].
    """

    t: int = 0
    cum_increment: float = 0.0
    cum_cond_var: float = 0.0

    @property
    def norm_increment(self) -> float:
        """Normalized sum ``S_t / sqrt(t)``."""
        return self.cum_increment / math.sqrt(self.t) if self.t else 0.0

    @property
    def norm_cond_var(self) -> float:
        """Time average ``N_t / t``."""
        return self.cum_cond_var / self.t if self.t else 0.0


class RiskAccumulator:
    """Precomputed closed-loop constants for streaming risk statistics."""

    def __init__(self, sys: system.LinearSystem, k, risk: RiskFunctional):
        kmat = np.asarray(getattr(k, "gain", k), dtype=float).reshape(sys.m, sys.n)
        self.a_k = sys.A + sys.B @ kmat
        self.qck = risk.closed_loop_weight(kmat)
        hswh = sys.noise_covariance_injected()
        self.trace_term = float(np.trace(self.qck @ hswh))
        # E[C^2|x] = x' G x + v3' x + m4  with  G = 4 A_K' Qck HSwH' Qck A_K
        self.cond_quad = 4.0 * self.a_k.T @ self.qck @ hswh @ self.qck @ self.a_k
        m3, m4 = noise_moment_constants(self.qck, sys.H, sys.noise)
        self.cond_lin = 4.0 * self.a_k.T @ self.qck @ m3
        self.m4 = m4
        self.closed_quad = self.a_k.T @ self.qck @ self.a_k

    def increment(self, x, x_next) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        xn = np.asarray(x_next, dtype=float).reshape(-1)
        return float(xn @ self.qck @ xn - x @ self.closed_quad @ x - self.trace_term)

    def conditional_variance(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        return float(x @ self.cond_quad @ x + self.cond_lin @ x + self.m4)

    def update(self, stats: RiskRunningStats, x, x_next) -> RiskRunningStats:
        return RiskRunningStats(
            t=stats.t + 1,
            cum_increment=stats.cum_increment + self.increment(x, x_next),
            cum_cond_var=stats.cum_cond_var + self.conditional_variance(x),
        )

    def increments_along(self, states: np.ndarray) -> np.ndarray:
        """All increments C_1..C_T for a stored trajectory (T+1, n)."""
        q_next = np.einsum("ti,ij,tj->t", states[1:], self.qck, states[1:])
        q_prev = np.einsum("ti,ij,tj->t", states[:-1], self.closed_quad, states[:-1])
        return q_next - q_prev - self.trace_term

    def conditional_variances_along(self, states: np.ndarray) -> np.ndarray:
        """E[C_{t+1}^2 | x_t] for t = 0..T-1 of a stored trajectory."""
        xs = states[:-1]
        quad = np.einsum("ti,ij,tj->t", xs, self.cond_quad, xs)
        return quad + xs @ self.cond_lin + self.m4


def risk_increment(sys: system.LinearSystem, k, qck, x_next, x) -> float:
    """One-step risk increment for the transition ``x -> x_next``.

    ``qck`` is the precomputed closed-loop risk weight. Conditionally zero-mean
    given ``x`` under the true noise law.
    """
    kmat = np.asarray(getattr(k, "gain", k), dtype=float).reshape(sys.m, sys.n)
    a_k = sys.A + sys.B @ kmat
    qck = np.asarray(qck, dtype=float)
    x = np.asarray(x, dtype=float).reshape(-1)
    xn = np.asarray(x_next, dtype=float).reshape(-1)
    ax = a_k @ x
    trace_term = float(np.trace(qck @ sys.noise_covariance_injected()))
    return float(xn @ qck @ xn - ax @ qck @ ax - trace_term)


def accumulate(
    stats: RiskRunningStats, sys: system.LinearSystem, k, risk: RiskFunctional, x, x_next
) -> RiskRunningStats:
    """Absorb one transition into the running statistics.

    Builds the closed-loop constants on the fly; for long trajectories use
    :class:`RiskAccumulator` directly.
    """
    return RiskAccumulator(sys, k, risk).update(stats, x, x_next)


def mixing_horizon(rho: float, decay: float = 1e-6) -> int:
    """Steps for the closed-loop transient to decay by ``decay``."""
    if rho <= 0.0:
        return 1
    if rho >= 1.0:
        raise UnstableMatrix(f"mixing horizon undefined for spectral radius {rho:.6g}")
    return max(1, math.ceil(math.log(decay) / math.log(rho)))


def default_burn_in(sys: system.LinearSystem, k) -> int:
    """Default estimator warm-up: ten mixing horizons of the closed loop."""
    rho = matops.spectral_radius(sys.closed_loop(np.asarray(getattr(k, "gain", k), dtype=float)))
    return 10 * mixing_horizon(rho)


def asymptotic_conditional_variance(sys: system.LinearSystem, k, risk: RiskFunctional) -> float:
    """Closed-form limit of the time-averaged conditional risk variance.

    Requires a stabilizing gain, controllability of the noise path into the
    closed loop, and a noise model with finite fourth moment (enforced at
    model construction).

    Raises:
        UnstableMatrix: if the closed loop is not Schur stable.
        NotControllable: if (A_K, H) fails the controllability rank test.
    """
    kmat = np.asarray(getattr(k, "gain", k), dtype=float).reshape(sys.m, sys.n)
    a_k = sys.A + sys.B @ kmat
    if not matops.is_schur_stable(a_k):
        raise UnstableMatrix("closed loop is not Schur stable")
    if not matops.is_controllable(a_k, sys.H):
        raise NotControllable("(A_K, H) is not controllable")
    qck = risk.closed_loop_weight(kmat)
    hswh = sys.noise_covariance_injected()
    sigma_k = matops.solve_discrete_lyapunov(a_k, hswh)
    _, m4 = noise_moment_constants(qck, sys.H, sys.noise)
    val = 4.0 * float(np.trace(qck @ hswh @ qck @ (sigma_k - hswh))) + m4
    return max(0.0, val)


def analytic_variance_estimate(
    sys: system.LinearSystem, k, risk: RiskFunctional
) -> VarianceEstimate:
    """Closed-form variance wrapped as an estimate (zero standard error)."""
    return VarianceEstimate(
        value=asymptotic_conditional_variance(sys, k, risk),
        stderr=0.0,
        method="analytic",
        samples=0,
    )


def _jackknife_variance_stderr(x: np.ndarray) -> float:
    """Jackknife standard error of the (ddof=1) sample variance."""
    n = len(x)
    if n < 3:
        return float("nan")
    s1 = x.sum()
    s2 = (x**2).sum()
    loo = ((s2 - x**2) - (s1 - x) ** 2 / (n - 1)) / (n - 2)
    return float(np.sqrt((n - 1) / n * ((loo - loo.mean()) ** 2).sum()))


def _clt_chunk(payload) -> np.ndarray:
    """Normalized end-of-horizon risk sums for one chunk of rollout seeds."""
    sys_, kmat, risk, horizon, burn, seeds = payload
    acc = RiskAccumulator(sys_, kmat, risk)
    a_k = acc.a_k
    r = len(seeds)
    noises = np.empty((r, horizon + burn, sys_.d))
    for i, s in enumerate(seeds):
        noises[i] = sys_.noise.sample(system.rng_stream(s), horizon + burn)
    x = np.zeros((r, sys_.n))
    s_sum = np.zeros(r)
    for t in range(horizon + burn):
        x_next = x @ a_k.T + noises[:, t] @ sys_.H.T
        if np.max(np.abs(x_next)) > 1e150:
            from .errors import DivergedRollout

            raise DivergedRollout(f"state norm overflow at step {t + 1}", time=t + 1)
        if t >= burn:
            q_next = np.einsum("ri,ij,rj->r", x_next, acc.qck, x_next)
            q_prev = np.einsum("ri,ij,rj->r", x, acc.closed_quad, x)
            s_sum += q_next - q_prev - acc.trace_term
        x = x_next
    return s_sum / math.sqrt(horizon)


def estimate_clt_variance(
    sys: system.LinearSystem,
    k,
    risk: RiskFunctional,
    horizon: int,
    rollouts: int,
    seed: int = 0,
    burn_in: Optional[int] = None,
    workers: int = 1,
    chunk_size: int = 256,
) -> VarianceEstimate:
    """Cross-rollout sample variance of the normalized risk sum, with jackknife
    standard error: the Monte Carlo proxy for the limiting variance of
    ``S_T / sqrt(T)``.

    Each rollout draws from its own seed stream; chunks of rollouts step in
    lockstep and may fan out over a process pool. Results are deterministic
    for a fixed (seed, rollouts) regardless of chunking or worker count.
    """
    if rollouts < 2:
        raise ValueError("rollouts must be >= 2 (>= 100 recommended)")
    kmat = np.asarray(getattr(k, "gain", k), dtype=float).reshape(sys.m, sys.n)
    if burn_in is None:
        burn_in = default_burn_in(sys, kmat)
    seeds = system.derive_seeds(seed, rollouts)
    chunks = [seeds[i : i + chunk_size] for i in range(0, rollouts, chunk_size)]
    payloads = [(sys, kmat, risk, horizon, burn_in, c) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_clt_chunk, payloads))
    else:
        parts = [_clt_chunk(p) for p in payloads]
    values = np.concatenate(parts)
    var = float(values.var(ddof=1))
    return VarianceEstimate(
        value=var,
        stderr=_jackknife_variance_stderr(values),
        method="mc_clt_variance",
        samples=rollouts,
    )


def normalized_sums(
    sys: system.LinearSystem,
    k,
    risk: RiskFunctional,
    horizon: int,
    rollouts: int,
    seed: int = 0,
    burn_in: Optional[int] = None,
    workers: int = 1,
) -> np.ndarray:
    """Per-rollout values of ``S_T / sqrt(T)`` (for distribution-shape checks)."""
    kmat = np.asarray(getattr(k, "gain", k), dtype=float).reshape(sys.m, sys.n)
    if burn_in is None:
        burn_in = default_burn_in(sys, kmat)
    seeds = system.derive_seeds(seed, rollouts)
    chunks = [seeds[i : i + 256] for i in range(0, rollouts, 256)]
    payloads = [(sys, kmat, risk, horizon, burn_in, c) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_clt_chunk, payloads))
    else:
        parts = [_clt_chunk(p) for p in payloads]
    return np.concatenate(parts)


def running_stats_trace(
    sys: system.LinearSystem,
    k,
    risk: RiskFunctional,
    horizon: int,
    seed: int = 0,
    burn_in: Optional[int] = None,
    stride: int = 1,
    x0=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One long rollout's running statistics, thinned by ``stride``.

    Returns arrays (t, S_t/sqrt(t), N_t/t) where t counts transitions after
    the warm-up segment.
    """
    kmat = np.asarray(getattr(k, "gain", k), dtype=float).reshape(sys.m, sys.n)
    if burn_in is None:
        burn_in = default_burn_in(sys, kmat)
    batch = system.simulate_batch(sys, kmat, [seed], x0=x0, horizon=horizon + burn_in)
    states = batch.states[0, burn_in:]
    acc = RiskAccumulator(sys, kmat, risk)
    incr = acc.increments_along(states)
    cond = acc.conditional_variances_along(states)
    t = np.arange(1, horizon + 1)
    s_norm = np.cumsum(incr) / np.sqrt(t)
    n_norm = np.cumsum(cond) / t
    sel = slice(stride - 1, None, stride)
    return t[sel], s_norm[sel], n_norm[sel]


def estimate_conditional_variance(
    sys: system.LinearSystem,
    k,
    risk: RiskFunctional,
    horizon: int,
    seed: int = 0,
    burn_in: Optional[int] = None,
    batches: int = 20,
) -> VarianceEstimate:
    """Single-rollout time average ``N_T / T`` with a batch-means standard error."""
    t, _, n_norm = running_stats_trace(sys, k, risk, horizon, seed=seed, burn_in=burn_in)
    # batch means of the per-step conditional variances
    cond = np.diff(np.concatenate([[0.0], n_norm * t]))
    usable = (len(cond) // batches) * batches
    means = cond[:usable].reshape(batches, -1).mean(axis=1)
    return VarianceEstimate(
        value=float(n_norm[-1]),
        stderr=float(means.std(ddof=1) / math.sqrt(batches)),
        method="mc_conditional",
        samples=horizon,
    )
