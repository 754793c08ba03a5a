"""Shared exception types. CLI maps these onto exit codes."""


class PropdistillError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(PropdistillError):
    """A corpus file could not be parsed; message carries file and line number."""


class ValidationError(PropdistillError):
    """Input data violates a documented contract (bad span, unknown label, ...)."""


class AlignmentError(PropdistillError):
    """A subword span does not fall inside any word token."""


class ConfigError(PropdistillError):
    """Invalid configuration: unknown keys, bad values, or dimension mismatches."""


class MissingTeacherCacheError(PropdistillError):
    """Teacher outputs required but not cached; run `propdistill cache-teacher`."""


class NumericalError(PropdistillError):
    """A loss term became NaN/inf during training."""

    def __init__(self, message, last_report=None):
        super().__init__(message)
        self.last_report = last_report
