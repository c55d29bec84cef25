"""Joint recommender + knowledge-graph-embedding training engine.

Two task towers share low-level feature-interaction layers; a symbolic
verifier checks the algebraic properties those layers are built on.
"""

__version__ = "0.1.0"

from .autodiff import ComputationRecord, ParameterStore, Tensor, backward
from .kernels import backend_name

__all__ = [
    "ComputationRecord",
    "ParameterStore",
    "Tensor",
    "backward",
    "backend_name",
    "__version__",
]
