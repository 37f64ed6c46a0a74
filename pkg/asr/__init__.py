"""Action-sufficient state representation learning for linear-Gaussian POMDPs."""

from .errors import (
    AsrError,
    DivergenceError,
    IdentifiabilityError,
    ModelValidationError,
    NumericalError,
    StageError,
)

__all__ = [
    "AsrError",
    "DivergenceError",
    "IdentifiabilityError",
    "ModelValidationError",
    "NumericalError",
    "StageError",
]
