"""
Exception hierarchy shared by every stage of the PMAM lab.

Each class carries the process exit code that pmam.py returns when the
error reaches the command line.
"""


class PmamError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class DimensionError(PmamError):
    """Array shapes do not agree."""


class ParameterError(PmamError):
    """A scalar parameter is outside its valid range."""


class ContractError(PmamError):
    """A precondition of an operation is violated."""


class DataError(PmamError):
    """Input data cannot support the requested operation."""

    exit_code = 3


class PersistenceError(PmamError):
    """Reading or writing a file failed."""

    exit_code = 3


class LoadError(PmamError):
    """A persisted artifact does not match the expected format or model."""

    exit_code = 3


class ConfigError(PmamError):
    """The run configuration failed validation."""

    exit_code = 2


class NumericalError(PmamError):
    """Training produced non-finite values."""

    exit_code = 4
