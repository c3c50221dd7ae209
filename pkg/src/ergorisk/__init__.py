"""Ergodic-risk constrained linear-quadratic control.

Computes the closed-form asymptotic conditional variance of a quadratic risk
functional along a stochastic LTI closed loop, solves the risk-constrained
LQR problem by primal-dual policy optimization, and validates the limit
behavior by seeded Monte Carlo simulation (including heavy-tailed noise).
"""

from .control import (
    LagrangianPoint,
    MinimizeResult,
    Policy,
    QuadraticCost,
    average_cost,
    lagrangian,
    lagrangian_gradient,
    lagrangian_point,
    lqr_solve,
    minimize_lagrangian,
    stationary_covariance,
    value_matrix,
)
from .errors import (
    AssumptionViolation,
    ConfigError,
    DivergedRollout,
    ErgoRiskError,
    EvaluationMismatch,
    GeneratorExhausted,
    NoConvergence,
    NotControllable,
    NotStabilizable,
    RcNotZero,
    RiskMomentUnavailable,
    ShapeError,
    StabilityLost,
    UnstableMatrix,
    WrongNoiseModel,
)
from .matops import (
    is_controllable,
    is_stabilizable,
    solve_dare,
    solve_discrete_lyapunov,
    spectral_radius,
)
from .pdopt import (
    KktReport,
    PrimalDualConfig,
    SlaterReport,
    check_slater,
    dual_function,
    min_feasible_multiplier,
    primal_dual_solve,
)
from .risk import (
    MomentEstimate,
    RiskAccumulator,
    RiskFunctional,
    RiskRunningStats,
    VarianceEstimate,
    accumulate,
    analytic_variance_estimate,
    asymptotic_conditional_variance,
    cross_moment_mc,
    estimate_clt_variance,
    estimate_conditional_variance,
    noise_moment_constants,
    normalized_sums,
    quad_variance_gaussian,
    quad_variance_mc,
    risk_increment,
    running_stats_trace,
)
from .system import (
    DisturbanceSchedule,
    LinearSystem,
    NoiseModel,
    TrajectoryBatch,
    derive_seeds,
    random_stabilizable_system,
    rng_stream,
    sample_noise,
    simulate_batch,
    simulate_rollout,
)

__version__ = "0.1.0"
