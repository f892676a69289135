"""Exception types raised across the package.

The CLI maps these onto process exit codes, so callers scripting around the
command line can tell configuration mistakes from bad input files and from
numerical breakdowns.
"""


class MixbartError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MixbartError, ValueError):
    exit_code = 2


class DataError(MixbartError, ValueError):
    exit_code = 3


class StructureError(DataError):
    """Invalid region graph (self loops, isolated regions, islands)."""


class NumericalError(MixbartError, ArithmeticError):
    exit_code = 4


class DomainError(MixbartError, ValueError):
    """A distribution parameter lies outside its support."""

    exit_code = 4
