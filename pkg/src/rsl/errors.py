"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration or arguments; maps to CLI exit code 2."""


class ShapeError(ValueError):
    """Array shape does not match what an operation requires."""


class NonFiniteError(FloatingPointError):
    """A computation produced or received NaN/Inf where finite values are required."""
