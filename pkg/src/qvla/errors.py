"""Exception hierarchy.

The CLI maps ``ConfigError`` to exit code 2 and every other ``QvlaError`` to 1.
"""


class QvlaError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(QvlaError, ValueError):
    """Invalid configuration, shape mismatch or unsupported option."""


class RangeError(QvlaError, ValueError):
    """A value lies outside the representable integer range."""


class CorruptionError(QvlaError):
    """A container or packed buffer failed validation on read."""


class NumericError(QvlaError, ArithmeticError):
    """Non-finite values, failed factorisation or non-convergence."""
