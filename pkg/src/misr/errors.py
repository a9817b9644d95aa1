"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code used when it escapes to the command line.
"""


class MisrError(Exception):
    exit_code = 1


class ContractError(MisrError, ValueError):
    """A caller violated a precondition (shape, dimension or index mismatch)."""

    exit_code = 2


class ConfigurationError(MisrError, ValueError):
    """Parameters are inconsistent or out of their documented range."""

    exit_code = 3


class ImageIOError(MisrError, OSError):
    exit_code = 4


class NumericalError(MisrError, ArithmeticError):
    """Non-finite values appeared during optimization.

    ``worker`` and ``stage`` locate the failure; ``snapshot`` holds the
    consensus scalars at the time of failure when available.
    """

    exit_code = 5

    def __init__(self, message, worker=None, stage=None, snapshot=None):
        super().__init__(message)
        self.worker = worker
        self.stage = stage
        self.snapshot = snapshot


class SynchronizationError(MisrError, RuntimeError):
    """A reduction or exchange was attempted with missing participants."""

    exit_code = 6


class AnalysisError(MisrError, ValueError):
    """A measurement could not be performed on the supplied image."""

    exit_code = 7
