"""Exception hierarchy shared by the solver modules."""


class SolverError(RuntimeError):
    """A solve could not be carried out."""


class InfeasibleError(SolverError):
    """A start point or region is infeasible."""


class NonFiniteError(SolverError):
    """An objective evaluated to inf or nan.

    The offending point is kept on ``point``.
    """

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class PenaltyOverflowError(SolverError):
    """The penalty coefficient hit its cap before the binary block settled."""
