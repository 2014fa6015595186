"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
numeric failures exit 3, IO failures (plain ``OSError``) exit 4.
"""

from __future__ import annotations


class CcvrError(Exception):
    """Base class for all package errors."""


class ArgumentError(CcvrError, ValueError):
    """An operation received arguments outside its domain."""


class ConfigError(CcvrError, ValueError):
    """An experiment or loss configuration is inconsistent."""


class NumericError(CcvrError, ArithmeticError):
    """A computation produced non-finite values or failed to factorize."""


class EmptyClassError(ArgumentError):
    """A class has no samples where at least one is required."""


class DegenerateCovarianceError(NumericError):
    """Cholesky factorization failed even after maximal jitter."""


class DegenerateInputError(ArgumentError):
    """A representation has zero variance, so similarity is undefined."""
