"""Exception taxonomy shared across the package."""


class FuseLabError(Exception):
    """Base class for all package errors."""


class DimensionError(FuseLabError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(FuseLabError):
    """Invalid configuration, plan, or override."""


class LengthError(ConfigError):
    """Sequence exceeds the model's maximum length."""


class NumericError(FuseLabError):
    """Non-finite value produced where finiteness is required."""


class StateError(FuseLabError):
    """Operation called in an invalid state (e.g. missing gradients)."""
