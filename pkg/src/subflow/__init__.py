"""subflow: video-to-displacement toolkit.

Extracts full-field subpixel displacements from grayscale video by
quadrature-filter phase analysis, manufactures labeled training data from
synthetic subpixel motion, and trains/evaluates two small encoder-decoder
flow networks (SubFlowNetS and SubFlowNetC) against that synthetic oracle.
"""

__version__ = "0.1.0"

from .errors import (
    DimensionError,
    DisplacementRangeWarning,
    EmptyRegionError,
    FormatError,
    NonFiniteGradientError,
    ParameterError,
    StateError,
    SubflowError,
)

__all__ = [
    "__version__",
    "SubflowError",
    "ParameterError",
    "DimensionError",
    "FormatError",
    "StateError",
    "EmptyRegionError",
    "NonFiniteGradientError",
    "DisplacementRangeWarning",
]
