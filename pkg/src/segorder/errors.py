"""Exception hierarchy shared across the package.

The CLI maps each family onto an exit code: configuration problems exit 2,
data problems exit 3 and numeric aborts exit 4.
"""


class SegOrderError(Exception):
    """Base class for all library errors."""


class ConfigError(SegOrderError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(SegOrderError):
    """Input data violates a format or content contract."""


class VocabularyError(DataError):
    pass


class SchemaError(DataError):
    pass


class CompatibilityError(DataError):
    """A file was produced under settings that do not match the reader's."""


class CorruptionError(DataError):
    """Truncated or damaged binary container; ``offset`` is the failing byte."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SegOrderError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DimensionError(SegOrderError, ValueError):
    pass


class CapacityError(SegOrderError, ValueError):
    """An input exceeds a fixed model capacity (context size, segment table)."""


class TargetError(SegOrderError, ValueError):
    pass


class DeterminismError(SegOrderError, RuntimeError):
    pass


class UndefinedMetricError(SegOrderError, ValueError):
    """A metric was requested over an empty set of instances."""
