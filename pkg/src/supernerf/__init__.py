"""Super-resolve a neural radiance field from low-resolution multi-view images.

Pipeline: synthetic scene generation -> LR field pretraining -> latent-
conditioned SR generator pretraining -> joint mutual-learning optimization
of the HR field and per-view latent codes -> evaluation and reports.
"""

from .errors import (ConfigurationError, DataIOError, NumericalStateError,
                     ShapeError, SuperNerfError)

__all__ = [
    "ConfigurationError",
    "DataIOError",
    "NumericalStateError",
    "ShapeError",
    "SuperNerfError",
]

__version__ = "0.1.0"
