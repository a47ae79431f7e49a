"""Exception and warning types shared across the toolkit.

Value-like misuse (bad parameters, mismatched shapes) raises ValueError
subclasses so callers may catch either the specific type or plain
ValueError.  File problems reuse the builtin OSError family.
"""


class SubflowError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(SubflowError, ValueError):
    """A parameter value is outside its documented domain."""


class DimensionError(SubflowError, ValueError):
    """Array shapes are inconsistent with each other or with an operation."""


class FormatError(SubflowError):
    """A binary or text payload does not conform to its declared format."""


class StateError(SubflowError, RuntimeError):
    """An operation was invoked outside its valid lifecycle state."""


class EmptyRegionError(SubflowError, ValueError):
    """A metric was requested over an empty pixel set."""


class NonFiniteGradientError(SubflowError, ArithmeticError):
    """A NaN or infinite gradient reached the optimizer."""


class DisplacementRangeWarning(UserWarning):
    """Phase differences approached the wrap limit; displacements unreliable."""
