"""Exception types shared across the package."""


class GsafError(Exception):
    """Base class for all package errors."""


class ShapeError(GsafError):
    """Tensor shapes are incompatible for the requested operation."""


class ValidationError(GsafError):
    """Input data, configuration, or file contents violate a contract."""


class AlignmentError(GsafError):
    """A word could not be paired with a feature-stream interval."""


class DivergenceError(GsafError):
    """Training produced a non-finite loss or gradient."""
