"""Sharpening depth discontinuities by resampling depth with a learned displacement field."""

from .errors import ConfigError, DataError, NumericError, ShapeError, SharpDepthError
from .sampler import DisplacementField, apply_residual, resample_displacement

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "NumericError", "ShapeError", "SharpDepthError",
    "DisplacementField", "apply_residual", "resample_displacement",
]
