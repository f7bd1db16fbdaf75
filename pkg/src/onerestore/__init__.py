"""Composite-degradation image restoration.

One model handles eleven weather/lighting degradation mixes, steered by a
scene descriptor that comes either from a text label or from a visual
classifier. Everything runs on a small numpy-backed autodiff engine.
"""

from .tensor import (DimensionError, NumericsError, Tensor, no_grad,
                     precision)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "precision",
    "NumericsError",
    "DimensionError",
    "__version__",
]
