"""Exception hierarchy shared by every module in the package."""


class LdmRicError(Exception):
    """Base class for all package errors."""


class ConfigError(LdmRicError, ValueError):
    """Invalid configuration, unknown codec, incompatible checkpoint."""


class DataError(LdmRicError, ValueError):
    """Malformed, missing or mismatched input data."""


class ShapeError(LdmRicError, ValueError):
    """Tensor shapes violate an operation's precondition."""


class RangeError(LdmRicError, IndexError):
    """A step index or similar ordinal is outside its valid range."""


class BackendError(LdmRicError, RuntimeError):
    """An external codec command failed."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class TrainingError(LdmRicError, RuntimeError):
    """Training diverged (non-finite loss or gradients)."""
