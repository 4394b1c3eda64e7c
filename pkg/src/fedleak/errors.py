"""Exception hierarchy. The CLI maps these onto exit codes."""


class FedLeakError(Exception):
    """Base class for all package errors."""


class ConfigError(FedLeakError, ValueError):
    """Invalid configuration, arguments or input files (exit code 2)."""


class ShapeError(FedLeakError, ValueError):
    """Array shapes do not agree with the model they are used with."""


class NumericError(FedLeakError, FloatingPointError):
    """Non-finite values or diverging training (exit code 3)."""
