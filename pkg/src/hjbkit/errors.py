"""Exception hierarchy shared by all solvers."""


class HJBError(Exception):
    """Base class for every error raised by hjbkit."""


class NonFiniteValue(HJBError, FloatingPointError):
    """A computation produced NaN or inf.

    ``where`` carries context such as the blow-up time of an integration or
    the iterate index of an optimizer.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class GrowthLimitExceeded(NonFiniteValue):
    pass


class StepUnderflow(HJBError):
    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class GimbalSingularity(HJBError, ValueError):
    pass


class SolverError(HJBError):
    """Base class for iterative solver failures."""


class MaxIterations(SolverError):
    pass


class SingularJacobian(SolverError):
    pass


class MeshLimitExceeded(SolverError):
    pass


class ContinuationFailed(SolverError):
    def __init__(self, message, horizon_reached=None):
        super().__init__(message)
        self.horizon_reached = horizon_reached


class NoConvergence(SolverError):
    pass


class Unbounded(SolverError):
    pass


class AllCandidatesFailed(SolverError):
    pass


class AllSolvesFailed(SolverError):
    pass


class InfeasibleAtMaxPenalty(SolverError):
    pass


class NewtonFailure(SolverError):
    pass


class ShockDetected(SolverError):
    pass


class NoCharacteristicFound(SolverError):
    pass


class EmptyDataset(HJBError, ValueError):
    pass


class ConfigError(HJBError, ValueError):
    pass
