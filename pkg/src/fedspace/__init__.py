"""Federated expectation-maximisation in the space of sufficient statistics."""

from .compression import QuantizerSpec
from .exceptions import (
    ConfigError,
    DegenerateComponentError,
    FedSpaceError,
    InconsistentStateError,
    ModelEvaluationError,
    RunAborted,
)
from .fedem import FedEmConfig, run_fedem
from .gmm import GaussianMixtureModel, GmmTheta, generate_synthetic
from .missem import MissEmConfig, run_missem
from .vrfedem import VrConfig, run_vrfedem

__version__ = "0.1.0"

__all__ = [
    "QuantizerSpec",
    "ConfigError",
    "DegenerateComponentError",
    "FedSpaceError",
    "InconsistentStateError",
    "ModelEvaluationError",
    "RunAborted",
    "FedEmConfig",
    "run_fedem",
    "GaussianMixtureModel",
    "GmmTheta",
    "generate_synthetic",
    "MissEmConfig",
    "run_missem",
    "VrConfig",
    "run_vrfedem",
]
