"""Exception types shared across the package."""


class SparseKPError(Exception):
    """Base class for all package errors."""


class ConfigError(SparseKPError, ValueError):
    pass


class DimensionError(SparseKPError, ValueError):
    pass


class BoundsError(SparseKPError, ValueError):
    pass


class InputError(SparseKPError, ValueError):
    pass


class CheckpointError(SparseKPError):
    pass


class GenerationError(SparseKPError):
    pass


class AggregationError(SparseKPError, ValueError):
    pass


class DivergenceError(SparseKPError, FloatingPointError):
    """Raised when training produces a non-finite loss or parameter."""
