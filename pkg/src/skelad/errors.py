"""Exception types shared across the package."""


class SkeladError(Exception):
    """Base class for all skelad errors."""


class DimensionError(SkeladError):
    """Tensor or array shapes are incompatible for the requested operation."""


class ConfigError(SkeladError):
    """Invalid configuration value or flag combination."""


class DataFormatError(SkeladError):
    """Malformed input file (parse or schema failure)."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(SkeladError):
    """A point violates its manifold constraint."""


class DegenerateError(SkeladError):
    """Degenerate geometric input (zero direction, near-zero mean direction)."""


class EmptySetError(SkeladError):
    """An operation requiring a non-empty collection received an empty one."""


class StateError(SkeladError):
    """Operation invoked on a state that does not support it."""


class NumericalError(SkeladError):
    """Non-finite value encountered during optimization."""


class UndefinedAUCError(SkeladError):
    """AUC requested on single-class labels."""
