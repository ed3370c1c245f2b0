"""Exceptions mapped to CLI exit codes: data errors exit 2, numerical failures exit 3."""


class RelmixError(Exception):
    """Base class for package errors."""


class DataError(RelmixError):
    """Malformed or missing input data (exit code 2)."""


class NumericalError(RelmixError):
    """Numerical failure such as a NaN loss (exit code 3)."""
