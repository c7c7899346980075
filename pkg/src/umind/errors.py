"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class UMindError(Exception):
    exit_code = 1


class ConfigError(UMindError, ValueError):
    exit_code = 2


class DataError(UMindError):
    exit_code = 3


class LoadError(DataError, FileNotFoundError):
    pass


class FormatError(DataError, ValueError):
    pass


class ZeroShotViolation(DataError):
    """Train and test splits share at least one category."""


class BoundsError(DataError, IndexError):
    pass


class UnsupportedRateError(ConfigError):
    pass


class EmptySelectionError(ConfigError):
    pass


class DegenerateInputError(DataError, ValueError):
    """Input for which the quantity is undefined (zero-norm row, constant image, ...)."""


class ProtocolError(DataError):
    """Evaluation protocol precondition broken (missing truth id, misaligned sets, ...)."""


class NumericalAbort(UMindError, FloatingPointError):
    """Non-finite loss during optimisation.

    ``snapshot`` holds whatever diagnostic state the raiser could collect.
    """

    exit_code = 4

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
