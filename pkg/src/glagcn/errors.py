"""Exception types shared across the package."""


class GlaGcnError(Exception):
    """Base class for all package errors."""


class ValidationError(GlaGcnError, ValueError):
    """Invalid skeleton, config, or other structured input."""


class ConfigError(ValidationError):
    """Model or training configuration violates an invariant."""


class ShapeError(GlaGcnError, ValueError):
    """Array dimensions do not line up."""


class UsageError(GlaGcnError, RuntimeError):
    """API called in the wrong state (missing cache, wrong mode, ...)."""


class DataError(GlaGcnError, ValueError):
    """Malformed pose file or checkpoint."""


class NumericError(GlaGcnError, ArithmeticError):
    """A non-finite value showed up during training."""
