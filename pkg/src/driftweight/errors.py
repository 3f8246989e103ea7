"""Exception hierarchy. The CLI maps each family to an exit code."""


class DriftWeightError(Exception):
    """Base class for all package errors."""


class ConfigError(DriftWeightError, ValueError):
    """Invalid configuration or argument (CLI exit code 1)."""


class DataError(DriftWeightError, ValueError):
    """Malformed or inconsistent data (CLI exit code 2)."""


class TrainingError(DriftWeightError, RuntimeError):
    """Numerical failure during training (CLI exit code 3)."""


class NumericalError(TrainingError):
    """Divergence of an iterative numerical routine."""
