"""Exception types raised across the package."""


class LLQMLError(Exception):
    """Base class for all package errors."""


class NonFiniteMatrix(LLQMLError, ValueError):
    pass


class NonPositiveDefinite(LLQMLError, ValueError):
    """A covariance failed its Cholesky factorization."""


class NoOracle(LLQMLError):
    """The model has no closed-form conditional moments."""


class MissingHessians(LLQMLError):
    """Order-2 linearization requested for a model without second derivatives."""


class StepUnderflow(LLQMLError):
    """The adaptive controller shrank the step below its floor."""


class NonFiniteStart(LLQMLError):
    """The objective is not finite at the optimizer starting point."""


class NotAdditiveNoise(LLQMLError):
    pass


class SimulationBlowup(LLQMLError):
    """A simulated path produced a non-finite state."""


class ConfigError(LLQMLError, ValueError):
    pass
