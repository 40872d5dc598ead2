"""Shared exception types. The CLI maps each family to a distinct exit code."""


class EcgFormerError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(EcgFormerError):
    """Bad or unknown configuration key, section, or value."""

    exit_code = 2


class MissingFileError(EcgFormerError):
    """A required input path does not exist."""

    exit_code = 3


class ArgumentRangeError(EcgFormerError):
    """An argument (fold id, layer index, lead name) is out of range."""

    exit_code = 4


class RecordFormatError(EcgFormerError):
    """Malformed record header or signal file."""

    exit_code = 5


class TruncationError(RecordFormatError):
    """Signal file shorter or longer than the header declares."""

    exit_code = 5


class EmptyDatasetError(EcgFormerError):
    """No parseable records found where at least one was required."""

    exit_code = 6


class ShapeError(EcgFormerError):
    """Tensor or matrix shapes incompatible with the requested operation."""

    exit_code = 7


class NumericalError(EcgFormerError):
    """A NaN or Inf appeared where finite values are guaranteed."""

    exit_code = 8


class UndefinedScoreError(EcgFormerError):
    """The metric normalization is degenerate (perfect == always-normal)."""

    exit_code = 9
