"""Neural-network layers built from proximal mappings, with the solvers,
gradients and experiment harness around them."""

from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateSpectrumError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    ShapeError,
)
from .rng import make_rng, substream

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "DegenerateSpectrumError",
    "NotPositiveDefiniteError",
    "NotSymmetricError",
    "ShapeError",
    "make_rng",
    "substream",
]
