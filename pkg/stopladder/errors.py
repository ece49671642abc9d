"""Exceptions raised by stopladder.

Every error carries enough context (key, coordinate, step, residual) for the
task runner to record it in the manifest without a traceback.
"""


class StopLadderError(Exception):
    pass


class ValidationError(StopLadderError):

    def __init__(self, key, constraint):
        self.key = key
        self.constraint = constraint
        super().__init__("{}: {}".format(key, constraint))


class DimensionError(StopLadderError):
    pass


class NumericError(StopLadderError):

    def __init__(self, message, coordinate=None):
        self.coordinate = coordinate
        if coordinate is not None:
            message = "{} (coordinate {})".format(message, coordinate)
        super().__init__(message)


class ExponentError(StopLadderError):
    pass


class ResolventError(StopLadderError):

    def __init__(self, alpha, condition):
        self.alpha = alpha
        self.condition = condition
        super().__init__(
            "resolvent (alpha*I - A) is near-singular at alpha={} "
            "(condition number {:.3e})".format(alpha, condition))


class ScheduleError(StopLadderError):
    pass


class SimulationError(StopLadderError):

    def __init__(self, path, step):
        self.path = path
        self.step = step
        super().__init__(
            "non-finite state on path {} at step {}".format(path, step))


class SolverError(StopLadderError):

    def __init__(self, message, step=None, residual=None):
        self.step = step
        self.residual = residual
        super().__init__(
            "{} (time step {}, residual {})".format(message, step, residual))


class StabilityError(StopLadderError):
    pass


class AccuracyError(StopLadderError):
    pass


class BasisError(StopLadderError):
    pass


class ContractError(StopLadderError):
    pass


class AssumptionError(StopLadderError):
    pass


class ConsistencyError(StopLadderError):
    pass


class IntegrityError(StopLadderError):
    pass
