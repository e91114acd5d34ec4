"""Semi-supervised cluster discovery over precomputed embeddings.

Alternates optimal-transport pseudo-labeling (E-step) with prototype-based
representation learning (M-step) to recover known and novel categories.
"""

__version__ = "0.1.0"

from .errors import OtclustError, ValidationError, NumericalError, DivergenceError

__all__ = [
    "OtclustError",
    "ValidationError",
    "NumericalError",
    "DivergenceError",
    "__version__",
]
