"""Penalty-based alternating minimization for mixed-integer problems.

The binary block of a mixed-integer problem is relaxed to [0, 1]^n and tied
to an auxiliary copy through a bilinear penalty whose coefficient grows
geometrically, so no cross-validation of the coefficient is needed.
"""

from regmip.exceptions import (
    InfeasibleError,
    NonFiniteError,
    PenaltyOverflowError,
    SolverError,
)
from regmip.penalty import (
    PenaltyValue,
    distance,
    hard_threshold,
    in_S,
    penalty,
    update_a,
)
from regmip.subsolver import FeasibleRegion, SubproblemResult, minimize, project
from regmip.alternating import (
    Block,
    MixedProblem,
    PenaltySchedule,
    SolveTrace,
    iteration_bound,
    lambda_threshold,
    solve,
    solve_multiblock,
)
from regmip.dc import (
    DCConstraint,
    DCFunction,
    DCProblem,
    LinearizationAnchor,
    convexify_region,
    dc_solve,
    linearize,
    linearized_lipschitz,
)

__version__ = "0.1.0"
