class PathrecError(Exception):
    """Base class for every error raised by pathrec"""


class SceneDomainError(PathrecError, ValueError):
    """A point or quantity lies outside the domain an operation is defined on"""


class ConfigError(PathrecError, ValueError):
    """Bad flags, malformed scene files, shape mismatches"""


class GridFormatError(ConfigError):
    """Binary file could not be decoded"""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InvariantViolation(PathrecError, RuntimeError):
    """An internal invariant does not hold, e.g. a sampled vertex with zero density"""


class NumericAbort(PathrecError, ArithmeticError):
    """Non-finite loss or gradient during optimization"""
