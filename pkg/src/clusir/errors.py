"""Exception hierarchy shared by every clusir module."""


class ClusIRError(Exception):
    """Base class for clusir errors."""


class ParameterError(ClusIRError, ValueError):
    """An argument is outside its documented domain."""


class ShapeError(ClusIRError, ValueError):
    """Array shapes are inconsistent with the operation."""


class NumericalError(ClusIRError, ArithmeticError):
    """A numerical consistency check failed."""


class StateError(ClusIRError, RuntimeError):
    """An object was used before the state it needs was produced."""


class TrainingError(ClusIRError, RuntimeError):
    """Training diverged.

    ``checkpoint`` holds the path of the last good checkpoint, if one was written.
    """

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
