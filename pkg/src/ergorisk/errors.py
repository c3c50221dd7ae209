"""Exception types shared across the package."""


class ErgoRiskError(Exception):
    """Base class for all library-specific errors."""


class ShapeError(ErgoRiskError):
    """Matrix or vector dimensions are inconsistent with the operation."""


class UnstableMatrix(ErgoRiskError):
    """A Schur-stable matrix was required (spectral radius < 1)."""


class NotStabilizable(ErgoRiskError):
    """The pair (A, B) admits no stabilizing feedback gain."""


class NotControllable(ErgoRiskError):
    """A controllability requirement on (A, H) failed."""


class RiskMomentUnavailable(ErgoRiskError):
    """The noise model lacks the finite fourth moment the risk analysis needs."""


class WrongNoiseModel(ErgoRiskError):
    """An analytic moment formula was called with an incompatible noise model."""


class RcNotZero(ErgoRiskError):
    """The optimizer branch requires a state-only risk functional (input weight zero)."""


class DivergedRollout(ErgoRiskError):
    """Simulated state norm overflowed; carries the truncation time."""

    def __init__(self, message: str, time: int):
        super().__init__(message)
        self.time = time


class StabilityLost(ErgoRiskError):
    """A solver iterate left the stabilizing set; carries the last safe gain."""

    def __init__(self, message: str, last_gain):
        super().__init__(message)
        self.last_gain = last_gain


class NoConvergence(ErgoRiskError):
    """An iterative solver hit its iteration cap before meeting tolerance.

    Carries the last iterate (and its gradient norm) when the solver has one:
    with quadratically convergent updates the cap is usually hit because the
    target sits below the float64 evaluation floor, in which case the last
    iterate is converged to machine precision.
    """

    def __init__(self, message: str, last_gain=None, grad_norm=None):
        super().__init__(message)
        self.last_gain = last_gain
        self.grad_norm = grad_norm


class GeneratorExhausted(ErgoRiskError):
    """The random instance generator ran out of retries."""


class EvaluationMismatch(ErgoRiskError):
    """Two algebraically equivalent evaluation routes disagreed beyond tolerance."""


class ConfigError(ErgoRiskError):
    """An experiment configuration failed strict validation."""


class AssumptionViolation(ErgoRiskError):
    """A model assumption (A1-A4) required by the requested operation fails."""
