"""Exception hierarchy shared by every stage of the pipeline."""

from typing import Optional


class PLBertError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 2


class ConfigError(PLBertError):
    """Invalid configuration or command-line usage."""

    exit_code = 1


class DataError(PLBertError):
    """Input data cannot be used (empty lexicon, empty split, ...)."""

    exit_code = 2


class FormatError(DataError):
    """An on-disk artifact violates its versioned format.

    Args:
        message: Human readable description
        record_index: Index of the offending record, when one applies
    """

    def __init__(self, message: str, record_index: Optional[int] = None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class NumericError(PLBertError):
    """Non-finite loss, gradient or parameter value."""

    exit_code = 3


class TraceMismatchError(PLBertError):
    """A forward trace was replayed against parameters it was not built from."""

    exit_code = 3
