"""Exception hierarchy shared by every module."""


class FastSfpError(Exception):
    """Base class for all library errors."""


class DimensionError(FastSfpError, ValueError):
    """Array shapes are inconsistent with the operation."""


class DegenerateVectorError(FastSfpError, ValueError):
    """A vector that must be normalized has (near) zero norm."""


class StructuralError(FastSfpError, ValueError):
    """Teacher and student taps do not line up."""


class RangeError(FastSfpError, ValueError):
    """A scalar argument lies outside its admissible range."""


class UndefinedMetricError(FastSfpError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class NumericError(FastSfpError, ArithmeticError):
    """A numerical routine failed to converge."""


class ConfigError(FastSfpError, ValueError):
    """A run configuration is malformed."""
