"""Order-beta quasi-maximum-likelihood estimation of SDEs with Local-Linearization moments."""

from .errors import (
    ConfigError,
    LLQMLError,
    MissingHessians,
    NoOracle,
    NonFiniteMatrix,
    NonFiniteStart,
    NonPositiveDefinite,
    NotAdditiveNoise,
    SimulationBlowup,
    StepUnderflow,
)
from .models import BUILTIN_NAMES, ObservationSeries, SdeModel, builtin, linear_sde
from .moments import Adaptive, Conventional, MomentState, StepStats, Uniform, propagate, step
from .qml import EstimateResult, ObjectiveSpec, OptimizerOptions, Variant, estimate, objective

__version__ = "0.1.0"

__all__ = [
    "Adaptive", "BUILTIN_NAMES", "ConfigError", "Conventional", "EstimateResult", "LLQMLError",
    "MissingHessians", "MomentState", "NoOracle", "NonFiniteMatrix", "NonFiniteStart",
    "NonPositiveDefinite", "NotAdditiveNoise", "ObjectiveSpec", "ObservationSeries",
    "OptimizerOptions", "SdeModel", "SimulationBlowup", "StepStats", "StepUnderflow", "Uniform",
    "Variant", "builtin", "estimate", "linear_sde", "objective", "propagate", "step",
]
