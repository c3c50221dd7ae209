"""Stochastic LTI plant, noise models, and seeded closed-loop simulation.

The plant evolves as ``X_{t+1} = A X_t + B U_t + H W_{t+1}`` with i.i.d.
zero-mean process noise of covariance exactly ``sigma_w``, an optional
periodic additive gust disturbance, and linear state feedback ``U_t = K X_t``.

Randomness uses counter-based Philox streams: rollout ``i`` of a batch draws
from a stream derived from ``(master_seed, i)``, so batches are bit-for-bit
reproducible and rollouts are embarrassingly parallel.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import matops
from .errors import (
    DivergedRollout,
    GeneratorExhausted,
    NotStabilizable,
    RiskMomentUnavailable,
    ShapeError,
)

# Truncate a rollout once the state norm passes this bound.
_OVERFLOW_NORM = 1e150


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent counter-based generator for one (seed, stream) pair."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
    return np.random.Generator(np.random.Philox(ss))


def derive_seeds(master_seed: int, count: int) -> list[int]:
    """Deterministic per-rollout seeds derived from one master seed."""
    words = np.random.SeedSequence(entropy=master_seed).generate_state(count, np.uint64)
    return [int(w) for w in words]


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean i.i.d. process noise with covariance exactly ``sigma_w``.

    kind:
        ``gaussian``   multivariate normal
        ``student_t``  elliptical Student-t, degrees of freedom ``nu`` (> 4 so
                       the fourth moment the risk analysis needs exists)
        ``empirical``  bootstrap draws from a centered sample pool
    scale:
        d x d factor applied to standardized draws so the sample covariance
        equals ``sigma_w``; for ``student_t`` the standardized draws are
        pre-shrunk by sqrt((nu-2)/nu).
    """

    kind: str
    sigma_w: np.ndarray
    nu: Optional[float] = None
    pool: Optional[np.ndarray] = None
    scale: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sw = matops.as_square(self.sigma_w, "sigma_w")
        sw = matops.symmetrize(sw)
        vals = np.linalg.eigvalsh(sw)
        if vals[0] <= 1e-12 * max(1.0, vals[-1]):
            raise ShapeError("sigma_w must be symmetric positive definite")
        object.__setattr__(self, "sigma_w", sw)
        object.__setattr__(self, "scale", _sym_sqrt(sw))
        if self.kind == "student_t":
            if self.nu is None or self.nu <= 4.0:
                raise RiskMomentUnavailable(
                    f"student_t noise needs nu > 4 for a finite fourth moment, got nu={self.nu}"
                )
        elif self.kind == "empirical":
            if self.pool is None or len(self.pool) < 2:
                raise ShapeError("empirical noise needs a pool of at least 2 samples")
            pool = np.atleast_2d(np.asarray(self.pool, dtype=float))
            pool = pool - pool.mean(axis=0)
            cov = pool.T @ pool / len(pool)
            object.__setattr__(self, "pool", pool)
            object.__setattr__(self, "sigma_w", cov)
            object.__setattr__(self, "scale", _sym_sqrt(cov))
        elif self.kind != "gaussian":
            raise ShapeError(f"unknown noise kind {self.kind!r}")

    @staticmethod
    def gaussian(sigma_w) -> "NoiseModel":
        return NoiseModel(kind="gaussian", sigma_w=np.asarray(sigma_w, dtype=float))

    @staticmethod
    def student_t(nu: float, sigma_w) -> "NoiseModel":
        return NoiseModel(kind="student_t", sigma_w=np.asarray(sigma_w, dtype=float), nu=nu)

    @staticmethod
    def empirical(samples) -> "NoiseModel":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        d = samples.shape[1]
        return NoiseModel(kind="empirical", sigma_w=np.eye(d), pool=samples)

    @property
    def dim(self) -> int:
        return self.sigma_w.shape[0]

    @property
    def kurtosis(self) -> float:
        """Marginal kurtosis (3 for gaussian; 3(nu-2)/(nu-4) for student_t)."""
        if self.kind == "gaussian":
            return 3.0
        if self.kind == "student_t":
            return 3.0 * (self.nu - 2.0) / (self.nu - 4.0)
        z = (self.pool - self.pool.mean(axis=0)) / self.pool.std(axis=0)
        return float(np.mean(z**4))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw ``count`` i.i.d. vectors with covariance exactly ``sigma_w``."""
        if count < 1:
            raise ValueError("count must be >= 1")
        if self.kind == "gaussian":
            z = rng.standard_normal((count, self.dim))
            return z @ self.scale.T
        if self.kind == "student_t":
            z = rng.standard_normal((count, self.dim))
            chi = rng.chisquare(self.nu, count)
            t = z / np.sqrt(chi / self.nu)[:, None]
            return np.sqrt((self.nu - 2.0) / self.nu) * t @ self.scale.T
        idx = rng.integers(0, len(self.pool), size=count)
        return self.pool[idx]


def sample_noise(model: NoiseModel, rng: np.random.Generator, count: int) -> np.ndarray:
    """Functional alias for :meth:`NoiseModel.sample`."""
    return model.sample(rng, count)


@dataclass(frozen=True)
class DisturbanceSchedule:
    """Additive deterministic state offset applied every ``period`` steps.

    The offset ``magnitude * direction`` lands on states whose index is a
    positive multiple of ``period`` (the gust "hits" while the state is being
    produced).
    """

    period: int = 1
    magnitude: float = 0.0
    direction: np.ndarray = None
    enabled: bool = False

    def __post_init__(self):
        if self.period < 1:
            raise ShapeError("schedule period must be >= 1")
        if self.enabled and self.direction is None:
            raise ShapeError("an enabled schedule needs a direction")
        if self.direction is not None:
            d = np.asarray(self.direction, dtype=float).reshape(-1)
            norm = np.linalg.norm(d)
            if self.enabled and norm == 0.0:
                raise ShapeError("schedule direction must be nonzero")
            if norm > 0.0:
                d = d / norm
            object.__setattr__(self, "direction", d)

    @staticmethod
    def off() -> "DisturbanceSchedule":
        return DisturbanceSchedule(period=1, magnitude=0.0, direction=None, enabled=False)

    def applies_at(self, state_index: int) -> bool:
        return self.enabled and state_index > 0 and state_index % self.period == 0

    def offset(self) -> np.ndarray:
        return self.magnitude * self.direction


@dataclass(frozen=True)
class LinearSystem:
    """Discrete-time plant ``X_{t+1} = A X_t + B U_t + H W_{t+1}``.

    Construction validates dimensional consistency, positive definiteness of
    the noise covariance, and stabilizability of (A, B).
    """

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    noise: NoiseModel

    def __post_init__(self):
        a = matops.as_square(self.A, "A")
        b = np.asarray(self.B, dtype=float)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        h = np.asarray(self.H, dtype=float)
        if h.ndim == 1:
            h = h.reshape(-1, 1)
        n = a.shape[0]
        if b.shape[0] != n:
            raise ShapeError(f"B has {b.shape[0]} rows, expected {n}")
        if h.shape[0] != n:
            raise ShapeError(f"H has {h.shape[0]} rows, expected {n}")
        if h.shape[1] != self.noise.dim:
            raise ShapeError(
                f"H has {h.shape[1]} columns but the noise model is {self.noise.dim}-dimensional"
            )
        if not np.all(np.isfinite(b)) or not np.all(np.isfinite(h)):
            raise ShapeError("B and H must be finite")
        if not matops.is_stabilizable(a, b):
            raise NotStabilizable("(A, B) failed the PBH stabilizability test")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "H", h)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def d(self) -> int:
        return self.H.shape[1]

    @property
    def sigma_w(self) -> np.ndarray:
        return self.noise.sigma_w

    def closed_loop(self, gain) -> np.ndarray:
        return self.A + self.B @ np.asarray(gain, dtype=float).reshape(self.m, self.n)

    def noise_covariance_injected(self) -> np.ndarray:
        """State-space noise covariance ``H sigma_w H^T``."""
        return self.H @ self.sigma_w @ self.H.T


@dataclass
class TrajectoryBatch:
    """Recorded closed-loop rollouts.

    states[i, t] is X_t of rollout i for t = 0..T, inputs[i, t] = K X_t, and
    noises[i, t-1] is the W_t that produced X_t (t = 1..T). Replaying a stored
    rollout through the dynamics reproduces it bit-for-bit.
    """

    seeds: list[int]
    horizon: int
    states: np.ndarray  # (rollouts, T+1, n)
    inputs: np.ndarray  # (rollouts, T+1, m)
    noises: np.ndarray  # (rollouts, T, d)

    @property
    def rollouts(self) -> int:
        return self.states.shape[0]


def _gain_matrix(k, m: int, n: int) -> np.ndarray:
    k = np.asarray(getattr(k, "gain", k), dtype=float)
    return k.reshape(m, n)


def simulate_rollout(
    sys: LinearSystem,
    k,
    x0=None,
    horizon: int = 1,
    schedule: Optional[DisturbanceSchedule] = None,
    seed: int = 0,
) -> TrajectoryBatch:
    """Simulate one seeded rollout under state feedback ``u = K x``.

    The gain may be destabilizing; the rollout runs until the state norm
    overflows, at which point :class:`DivergedRollout` carries the truncation
    time.
    """
    batch = simulate_batch(sys, k, [seed], x0=x0, horizon=horizon, schedule=schedule)
    return batch


def simulate_batch(
    sys: LinearSystem,
    k,
    seeds: Sequence[int],
    x0=None,
    horizon: int = 1,
    schedule: Optional[DisturbanceSchedule] = None,
) -> TrajectoryBatch:
    """Simulate one rollout per seed, stepping all rollouts in lockstep.

    Rollout i draws its noise from the Philox stream of ``seeds[i]`` alone.
    Repeating a call with the same seed list is bit-for-bit reproducible;
    batched state updates share BLAS kernels, so callers that need results
    independent of parallel fan-out must keep the grouping fixed (the CLI
    chunks rollouts in fixed blocks for exactly this reason).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    schedule = schedule or DisturbanceSchedule.off()
    if schedule.enabled and schedule.direction.shape[0] != sys.n:
        raise ShapeError("schedule direction dimension does not match the state")
    kmat = _gain_matrix(k, sys.m, sys.n)
    a_k = sys.A + sys.B @ kmat
    r = len(seeds)
    T = horizon

    noises = np.empty((r, T, sys.d))
    for i, s in enumerate(seeds):
        noises[i] = sys.noise.sample(rng_stream(s), T)

    x = np.zeros((r, sys.n)) if x0 is None else np.broadcast_to(
        np.asarray(x0, dtype=float).reshape(-1), (r, sys.n)
    ).copy()
    states = np.empty((r, T + 1, sys.n))
    states[:, 0] = x
    for t in range(T):
        x = x @ a_k.T + noises[:, t] @ sys.H.T
        if schedule.applies_at(t + 1):
            x = x + schedule.offset()
        if np.max(np.abs(x)) > _OVERFLOW_NORM:
            raise DivergedRollout(
                f"state norm exceeded {_OVERFLOW_NORM:g} at step {t + 1}", time=t + 1
            )
        states[:, t + 1] = x

    inputs = states @ kmat.T
    return TrajectoryBatch(
        seeds=list(seeds), horizon=T, states=states, inputs=inputs, noises=noises
    )


def replay_states(
    sys: LinearSystem, k, batch: TrajectoryBatch, schedule: Optional[DisturbanceSchedule] = None
) -> np.ndarray:
    """Recompute states from recorded noises with the same operation order as
    the simulator; used to verify exact dynamics replay."""
    schedule = schedule or DisturbanceSchedule.off()
    kmat = _gain_matrix(k, sys.m, sys.n)
    a_k = sys.A + sys.B @ kmat
    out = np.empty_like(batch.states)
    x = batch.states[:, 0].copy()
    out[:, 0] = x
    for t in range(batch.horizon):
        x = x @ a_k.T + batch.noises[:, t] @ sys.H.T
        if schedule.applies_at(t + 1):
            x = x + schedule.offset()
        out[:, t + 1] = x
    return out


def random_stabilizable_system(
    n: int,
    m: int,
    d: int,
    rng: np.random.Generator,
    rho_target: float = 0.9,
    noise_kind: str = "gaussian",
    nu: float = 5.0,
    max_tries: int = 64,
) -> LinearSystem:
    """Random test instance satisfying the model assumptions.

    A is rescaled to spectral radius ``rho_target`` or, with probability 1/2,
    to ``1/rho_target`` (unstable, exercising stabilization). H is drawn full
    row rank, which requires ``d >= n``; the noise covariance is a random
    well-conditioned PD matrix with trace d.
    """
    if not 0.0 < rho_target < 1.0:
        raise ValueError("rho_target must lie in (0, 1)")
    if min(n, m, d) < 1:
        raise ShapeError("n, m, d must all be >= 1")
    if d < n:
        raise ShapeError("full row rank H requires d >= n")

    for _ in range(max_tries):
        a = rng.standard_normal((n, n))
        rho = matops.spectral_radius(a)
        if rho == 0.0:
            continue
        target = rho_target if rng.random() < 0.5 else 1.0 / rho_target
        a *= target / rho
        b = rng.standard_normal((n, m))
        h = rng.standard_normal((n, d))
        g = rng.standard_normal((d, d))
        sw = g @ g.T / d + 0.5 * np.eye(d)
        sw *= d / np.trace(sw)

        if np.linalg.matrix_rank(h) < n:
            continue
        if not matops.is_stabilizable(a, b):
            continue
        if noise_kind == "gaussian":
            noise = NoiseModel.gaussian(sw)
        elif noise_kind == "student_t":
            noise = NoiseModel.student_t(nu, sw)
        else:
            raise ValueError(f"generator supports gaussian or student_t, got {noise_kind!r}")
        return LinearSystem(A=a, B=b, H=h, noise=noise)
    raise GeneratorExhausted(f"no valid instance after {max_tries} draws")


def trajectory_to_csv(batch: TrajectoryBatch, path, rollout: int = 0) -> None:
    """Write one rollout as CSV: t, state, input, and noise components.

    Noise column at t holds the W_t that produced X_t; row t = 0 leaves it
    empty. Values carry 17 significant digits so parsing them back is exact.
    """
    from .serialize import format_float

    n = batch.states.shape[2]
    m = batch.inputs.shape[2]
    d = batch.noises.shape[2]
    header = (
        ["t"]
        + [f"x{i}" for i in range(n)]
        + [f"u{i}" for i in range(m)]
        + [f"w{i}" for i in range(d)]
    )
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(batch.horizon + 1):
            row = [str(t)]
            row += [format_float(v) for v in batch.states[rollout, t]]
            row += [format_float(v) for v in batch.inputs[rollout, t]]
            if t == 0:
                row += [""] * d
            else:
                row += [format_float(v) for v in batch.noises[rollout, t - 1]]
            fh.write(",".join(row) + "\n")


def trajectory_from_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a trajectory CSV back into (states, inputs, noises) arrays."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n = sum(1 for c in header if c.startswith("x"))
        m = sum(1 for c in header if c.startswith("u"))
        d = sum(1 for c in header if c.startswith("w"))
        states, inputs, noises = [], [], []
        for line in fh:
            parts = line.strip().split(",")
            vals = parts[1:]
            states.append([float(v) for v in vals[:n]])
            inputs.append([float(v) for v in vals[n : n + m]])
            w = vals[n + m :]
            if any(v for v in w):
                noises.append([float(v) for v in w])
    return np.array(states), np.array(inputs), np.array(noises)
