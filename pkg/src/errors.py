"""Exception hierarchy shared by the simulator modules."""
from typing import Any


class PPDLError(Exception):
    """Base class for every error raised by this package."""


class DomainError(PPDLError, ValueError):
    """A parameter lies outside its mathematical domain."""


class CapacityError(PPDLError, OverflowError):
    """A count does not fit the representation or the configured limit."""


class ArmIndexError(PPDLError, IndexError):
    """Arm index outside [0, num_arms)."""


class BanditStateError(PPDLError):
    """Statistics requested for an arm that has never been played."""


class NumericalError(PPDLError, ArithmeticError):
    """An iterative or floating-point computation failed."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        self.diagnostics = diagnostics or {}
        if self.diagnostics:
            details = ', '.join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)


class ProtocolError(PPDLError):
    """Secret-sharing contract violated (threshold, evaluation points)."""


class AggregationError(ProtocolError):
    """Secure aggregation could not complete for a group."""


class ConfigurationError(PPDLError, ValueError):
    """Invalid experiment configuration or unusable data layout."""


class DataParseError(PPDLError, ValueError):
    """Malformed dataset file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
