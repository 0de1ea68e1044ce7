"""Exception types shared across the toolkit."""


class DiarkitError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DiarkitError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(DiarkitError):
    """Autodiff contract violation, e.g. backward from a non-scalar."""


class NumericError(DiarkitError):
    """Non-finite values where finite ones are required."""


class ConfigError(DiarkitError):
    """Inconsistent or unusable configuration."""


class RttmParseError(DiarkitError):
    """Malformed RTTM input; carries the offending line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class StatsError(DiarkitError):
    """Corpus too small or degenerate to extract simulation statistics."""


class FormatError(DiarkitError):
    """Corrupt or unsupported binary file."""
