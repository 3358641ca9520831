"""Exception hierarchy shared by every geoshare module."""


class GeoShareError(Exception):
    """Base class for all library errors."""


class ParameterError(GeoShareError, ValueError):
    """An argument is out of range or has an incompatible shape."""


class DataError(GeoShareError, ValueError):
    """Input data violates a numeric precondition (non-finite, asymmetric, ...)."""


class NumericError(GeoShareError, ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message: str, layer: int | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class ConfigurationError(GeoShareError, ValueError):
    """A structural object (coloring, edge layer, experiment config) is inconsistent."""


class ConvergenceError(GeoShareError, RuntimeError):
    """Raised under the strict policy when eigenpairs fail to converge."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class OracleFailure(GeoShareError, AssertionError):
    """An oracle comparison exceeded its tolerance."""
