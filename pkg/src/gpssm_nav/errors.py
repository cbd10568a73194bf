"""Exception hierarchy.

Every error raised on bad data or numerical trouble derives from
:class:`NavigationError` so the CLI can map it to exit code 2.
"""


class NavigationError(Exception):
    """Base class for data, model and numerical errors."""


class InputShapeError(NavigationError, ValueError):
    pass


class InvalidArgumentsError(NavigationError, ValueError):
    pass


class ConditioningError(NavigationError, ArithmeticError):
    pass


class OptimizationDivergedError(NavigationError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class RankDeficiencyError(NavigationError, ValueError):
    pass


class InvalidSampleError(NavigationError, ValueError):
    pass


class NoMeasurementError(NavigationError, ValueError):
    pass


class NoDataError(NavigationError, ValueError):
    pass


class OutOfRangeError(NavigationError, ValueError):
    pass


class DegenerateLikelihoodError(NavigationError):
    def __init__(self, step):
        super().__init__(f"all particle weights vanished at step {step}")
        self.step = step


class AlignmentError(NavigationError, ValueError):
    pass


class WaypointSpacingError(NavigationError, ValueError):
    pass


class ConsistencyError(NavigationError):
    """Raised when an algorithm violates one of its own guarantees."""


class StageError(NavigationError):
    """Wraps a module error with the pipeline stage that produced it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
