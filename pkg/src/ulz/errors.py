"""Exception types shared across the package."""


class UlzError(Exception):
    """Base class for package errors."""


class ArgumentError(UlzError, ValueError):
    """Bad shapes, ranges or flag values."""


class NumericError(UlzError, ArithmeticError):
    """A factorization or other numeric routine failed."""


class ConvergenceError(NumericError):
    """An iterative routine ran out of iterations.

    ``estimate`` carries the last value that was computed.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class ConstraintError(UlzError, ValueError):
    """A solver parameter lies outside its admissible range."""


class PreconditionError(UlzError):
    """A convergence precondition does not hold for the instance."""


class ConfigError(UlzError, KeyError):
    """Missing or unknown configuration entry."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TrainingError(UlzError, RuntimeError):
    """Non-finite gradients or losses during training; ``stage`` is the stage index."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class FormatError(UlzError, OSError):
    """A binary or CSV file does not follow its documented layout."""
