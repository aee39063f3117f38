"""Exception types shared across the engine.

The CLI maps these onto exit codes: input problems exit 1, a failed
aperiodic-unichain check exits 2, numerical failures exit 3.
"""


class RBError(Exception):
    """Base class for engine errors."""


class InputError(RBError):
    """Malformed instance, configuration, or CLI arguments."""


class AssumptionError(RBError):
    """The optimal single-armed policy does not induce an aperiodic unichain."""


class NumericalError(RBError):
    """An iterative routine failed to converge or lost precision."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
