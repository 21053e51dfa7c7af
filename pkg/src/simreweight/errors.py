"""Exception hierarchy shared by every subsystem.

The CLI maps the three top-level categories to exit codes:
ConfigError -> 2, IoError -> 3, Diverged -> 4.
"""

from __future__ import annotations


class SimReweightError(Exception):
    """Base class for all package errors."""


class ConfigError(SimReweightError, ValueError):
    """Invalid configuration, ranges, or arguments."""


class InvalidRange(ConfigError):
    pass


class WindowTooLong(ConfigError):
    pass


class IoError(SimReweightError, OSError):
    """Missing or inconsistent on-disk artifacts."""


class Diverged(SimReweightError, ArithmeticError):
    """An objective or gradient became non-finite during optimization."""


class NonFiniteGradient(Diverged):
    pass


class ZeroTotalLoss(SimReweightError, ValueError):
    pass


class ShapeMismatch(SimReweightError, ValueError):
    pass


class NonFiniteValue(Diverged):
    pass


class NonScalarOutput(SimReweightError, ValueError):
    pass
