"""Exception hierarchy shared by the pipeline modules."""

from __future__ import annotations


class AdaptError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(AdaptError, ValueError):
    exit_code = 2


class LayoutError(AdaptError, ValueError):
    """Parameter or array shapes do not line up."""

    exit_code = 2


class DomainError(AdaptError, ValueError):
    """An argument is outside the domain of an operation."""

    exit_code = 2


class FormatError(AdaptError, ValueError):
    """A cohort or checkpoint file could not be parsed."""

    exit_code = 2

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DependencyError(AdaptError):
    """A pipeline stage was requested before its prerequisites exist."""

    exit_code = 3


class NumericError(AdaptError, FloatingPointError):
    exit_code = 4


class PushError(AdaptError):
    exit_code = 4


class DivergenceError(NumericError):
    """Training produced a non-finite loss; carries the last finite model."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good
