"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/validation problems
exit 1, numerical failures exit 2.
"""


class DuetSynthError(Exception):
    """Base class for all package errors."""


class ShapeError(DuetSynthError, ValueError):
    """An array has the wrong shape for the skeleton/motion it claims to match."""


class DomainError(DuetSynthError, ValueError):
    """A value is outside its legal domain (non-positive scale, T < 2, ...)."""


class ConfigError(DuetSynthError, ValueError):
    """Invalid configuration: unknown kind, empty split, malformed option."""


class FormatError(DuetSynthError, ValueError):
    """A serialized clip/dataset/checkpoint file failed to parse or validate."""


class DivergenceError(DuetSynthError, RuntimeError):
    """An optimization produced non-finite values.

    Carries the energy trace recorded up to the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class TrainingDivergedError(DuetSynthError, RuntimeError):
    """Training hit a non-finite loss.

    ``history`` holds the per-epoch records collected so far and
    ``last_good_state`` the most recent finite parameter snapshot.
    """

    def __init__(self, message, history=None, last_good_state=None):
        super().__init__(message)
        self.history = history or []
        self.last_good_state = last_good_state
