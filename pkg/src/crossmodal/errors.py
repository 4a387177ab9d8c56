"""Exception hierarchy; each class maps to a CLI exit code."""


class CrossModalError(Exception):
    exit_code = 1


class UsageError(CrossModalError, ValueError):
    """Bad arguments or configuration."""

    exit_code = 1


class ConfigurationError(UsageError):
    """Registry or checkpoint does not match what the caller asked for."""


class DataError(CrossModalError):
    """Missing, malformed or insufficient data."""

    exit_code = 2


class NumericalError(CrossModalError, FloatingPointError):
    """Non-finite loss or parameters during training."""

    exit_code = 3
