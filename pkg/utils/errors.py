"""
Error taxonomy for the toolkit.

Everything derives from the builtin exception the code would have raised
anyway (ValueError for bad inputs, RuntimeError for numerical trouble), so
callers that only catch builtins keep working.
"""

from typing import Optional


class DynamicSpikeError(Exception):
    """Root of all toolkit errors"""


class ConfigError(DynamicSpikeError, ValueError):
    """
    Invalid configuration value or file.
    Carries the file path and line number when they are known.
    """

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class DomainError(DynamicSpikeError, ValueError):
    """A geometric or dimensional precondition does not hold"""


class NumericalError(DynamicSpikeError, RuntimeError):
    """Non-finite data or a violated numerical invariant"""


class SeparationError(NumericalError):
    """Certificate interpolation system is singular or nodes are too close"""

    def __init__(self, message: str, min_separation: float = float("nan"),
                 condition_number: float = float("nan")):
        self.min_separation = min_separation
        self.condition_number = condition_number
        super().__init__(message)


# Exit codes used by the command line
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the process exit code"""
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL_ERROR
    if isinstance(error, (ConfigError, DomainError, ValueError, KeyError, TypeError, FileNotFoundError)):
        return EXIT_CONFIG_ERROR
    return EXIT_NUMERICAL_ERROR
