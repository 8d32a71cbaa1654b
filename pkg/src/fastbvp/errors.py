"""Exception hierarchy shared by all fastbvp modules."""


class FastBvpError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(FastBvpError):
    """Input file does not follow the expected layout."""


class DataError(FastBvpError):
    """Values are present but unusable (non-finite, out of range, constant)."""


class TooShortError(DataError):
    """Clip is shorter than the minimum supported duration."""


class StateError(FastBvpError):
    """Operation applied to an object in the wrong state (e.g. wrong color space)."""


class ShapeError(FastBvpError, ValueError):
    """Array shapes are inconsistent with the layer or model configuration."""


class ConfigError(FastBvpError, ValueError):
    """Configuration values are invalid or mutually inconsistent."""


class InsufficientSignalError(DataError):
    """Too few peaks were found to estimate a rate."""


class DegenerateSignalError(DataError):
    """Signal carries no variation where variation is required."""


class CorrelationUndefinedError(DataError):
    """Pearson correlation requested on constant input."""


class DivergenceError(FastBvpError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_finite_loss=None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss
