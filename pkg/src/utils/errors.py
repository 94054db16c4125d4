"""
Error types raised by the tadlp library.

The CLI maps every TadlpError (and FileNotFoundError) to exit code 2.
"""

from typing import Optional


class TadlpError(Exception):
    """Base class for all library errors"""


class ParseError(TadlpError, ValueError):
    """A line of an input file could not be parsed"""

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}"
        if line_number is not None:
            location = f"{location}:{line_number}" if location else f"line {line_number}"
        super().__init__(f"{location}: {message}" if location else message)


class ValidationError(TadlpError, ValueError):
    """Input data violates an invariant (negative counts, conflicting duplicates, ...)"""


class ConfigError(TadlpError, ValueError):
    """A run configuration field is outside its allowed range"""


class ConvergenceError(TadlpError, RuntimeError):
    """An iterative routine ran out of iterations"""

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")


class DegenerateSelectionError(TadlpError, ValueError):
    """Selected intervals leave no background pairs to estimate beta from"""


class InsufficientDistancesError(TadlpError, ValueError):
    """Interval too short to build decay profiles"""
