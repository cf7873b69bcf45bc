"""Exception types shared across modules.

Each carries an ``exit_code`` used by the command-line front end.
"""


class TodaDegreeError(Exception):
    exit_code = 2


class InvalidArgument(TodaDegreeError, ValueError):
    pass


class CriticalParameter(TodaDegreeError, ValueError):
    """A parameter sits on a critical set where the degree is undefined."""


class SolvabilityError(TodaDegreeError, ValueError):
    pass


class PoleError(TodaDegreeError, ValueError):
    pass


class DegenerateWeight(TodaDegreeError, ValueError):
    pass


class CollisionError(TodaDegreeError, ValueError):
    pass


class GeometryError(TodaDegreeError, ValueError):
    pass


class DegeneracyError(TodaDegreeError, ValueError):
    """Linearization too close to singular to read off an index."""


class NoRootError(TodaDegreeError, ValueError):
    pass


class MatchingFailure(TodaDegreeError, RuntimeError):
    pass


class DivergenceError(TodaDegreeError, RuntimeError):
    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ResolutionError(TodaDegreeError, RuntimeError):
    exit_code = 4
