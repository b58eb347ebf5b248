"""Successive convexification for difference-of-convex objectives.

The objective is ``f = f_a - f_b`` with ``f_a``, ``f_b`` convex, and
constraints may take the same form ``g_a - g_b <= 0``.  Each outer iteration
replaces ``f_b`` and every ``g_b`` by their tangent planes at the current
point, which turns the problem into a convex-in-blocks one, and runs the
alternating penalty solver on it with a fresh penalty schedule.  Since the
tangent plane under-estimates a convex function, the surrogate objective
lies above ``f`` and the convexified region lies inside the original one.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from regmip.alternating import (
    MixedProblem,
    PenaltySchedule,
    SolveTrace,
    iteration_bound,
    solve,
    solve_multiblock,
)
from regmip.exceptions import InfeasibleError
from regmip.penalty import distance, gap, hard_threshold
from regmip.subsolver import ConvexInequality, FeasibleRegion, project

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvexPart:
    """A convex function of ``(x, y)`` with its partial gradients."""

    fun: Callable
    grad_x: Callable
    grad_y: Callable

    @classmethod
    def zero(cls, n, m):
        return cls(lambda x, y: 0.0, lambda x, y: np.zeros(n), lambda x, y: np.zeros(m))


@dataclass(frozen=True)
class DCFunction:
    """``fa - fb`` with both parts convex."""

    fa: ConvexPart
    fb: ConvexPart

    def __call__(self, x, y):
        return float(self.fa.fun(x, y)) - float(self.fb.fun(x, y))

    def grad_x(self, x, y):
        return np.asarray(self.fa.grad_x(x, y), float) - np.asarray(self.fb.grad_x(x, y), float)

    def grad_y(self, x, y):
        return np.asarray(self.fa.grad_y(x, y), float) - np.asarray(self.fb.grad_y(x, y), float)


@dataclass(frozen=True)
class DCConstraint:
    """Constraint ``ga(z) - gb(z) <= 0`` on the stacked vector ``z = (x, y)``."""

    ga: Callable
    ga_grad: Callable
    gb: Callable
    gb_grad: Callable
    name: str = ""

    def __call__(self, z):
        return float(self.ga(z)) - float(self.gb(z))


@dataclass(frozen=True)
class LinearizationAnchor:
    """Value and gradient of a convex part at the point ``(x, y)``."""

    x: np.ndarray
    y: np.ndarray
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray

    @classmethod
    def at(cls, part: ConvexPart, x, y):
        x = np.array(x, dtype=float)
        y = np.array(y, dtype=float)
        return cls(x, y, float(part.fun(x, y)), np.asarray(part.grad_x(x, y), float),
                   np.asarray(part.grad_y(x, y), float))


def linearize(part: ConvexPart, anchor: LinearizationAnchor) -> ConvexPart:
    """Tangent plane of ``part`` at the anchor, as an affine :class:`ConvexPart`."""
    gx, gy = anchor.grad_x, anchor.grad_y
    x0, y0, v0 = anchor.x, anchor.y, anchor.value

    def fun(x, y):
        return v0 + float(gx @ (np.asarray(x) - x0)) + float(gy @ (np.asarray(y) - y0))

    return ConvexPart(fun, lambda x, y: gx, lambda x, y: gy)


def linearized_lipschitz(L, grad_x):
    """Lipschitz constant in ``x`` of ``fa`` minus a tangent plane with slope ``grad_x``."""
    return float(L) + float(np.linalg.norm(grad_x))


def convexify_region(region: FeasibleRegion, constraints: Sequence[DCConstraint], z0,
                     tol=1e-9) -> FeasibleRegion:
    """Inner convex approximation of ``region`` cut by DC constraints at ``z0``.

    Each ``ga - gb <= 0`` becomes ``ga(z) - gb(z0) - <grad gb(z0), z - z0> <= 0``.
    With no DC constraints the region is returned unchanged.

    Raises
    ------
    InfeasibleError
        If ``z0`` violates the original constraints by more than ``tol``.
    """
    z0 = np.asarray(z0, dtype=float)
    if region.violation(z0) > tol:
        raise InfeasibleError(
            f"linearization point violates the convex constraints by {region.violation(z0):.3g}")
    bad = [c.name or str(i) for i, c in enumerate(constraints) if c(z0) > tol]
    if bad:
        raise InfeasibleError(f"linearization point violates DC constraints {bad}")
    if not constraints:
        return region
    cuts = []
    for c in constraints:
        gb0 = float(c.gb(z0))
        gg = np.asarray(c.gb_grad(z0), dtype=float)

        def fun(z, c=c, gb0=gb0, gg=gg):
            return float(c.ga(z)) - gb0 - float(gg @ (z - z0))

        def grad(z, c=c, gg=gg):
            return np.asarray(c.ga_grad(z), dtype=float) - gg

        cuts.append(ConvexInequality(fun, grad, c.name))
    return region.with_inequalities(cuts)


@dataclass
class DCProblem:
    """Mixed problem with a DC objective.

    ``region`` holds the convex constraints; ``dc_constraints`` the rest.
    ``lipschitz`` is a Lipschitz constant in ``x`` of ``objective.fa`` and is
    used only to report per-iteration bounds for the inner solves.
    """

    n: int
    m: int
    objective: DCFunction
    region: FeasibleRegion
    dc_constraints: Sequence[DCConstraint] = ()
    lipschitz: Optional[float] = None
    blocks: Sequence = ()
    x_region: Optional[FeasibleRegion] = None
    joint_step: bool = False
    name: str = ""

    def __post_init__(self):
        if self.region.dim != self.n + self.m:
            raise ValueError(f"region has dim {self.region.dim}, expected {self.n + self.m}")

    def violation(self, z):
        z = np.asarray(z, dtype=float)
        worst = self.region.violation(z)
        for c in self.dc_constraints:
            worst = max(worst, c(z))
        return worst

    def surrogate(self, x_anchor, y_anchor):
        """Convex-in-blocks problem obtained at the anchor, plus the anchor itself."""
        anchor = LinearizationAnchor.at(self.objective.fb, x_anchor, y_anchor)
        tangent = linearize(self.objective.fb, anchor)
        fa = self.objective.fa
        z0 = np.concatenate([anchor.x, anchor.y])
        region = convexify_region(self.region, self.dc_constraints, z0)
        x_region = self.x_region
        if x_region is not None and self.dc_constraints:
            x_region = convexify_region(x_region, self.dc_constraints, z0)
        problem = MixedProblem(
            n=self.n, m=self.m,
            fun=lambda x, y: float(fa.fun(x, y)) - tangent.fun(x, y),
            grad_x=lambda x, y: np.asarray(fa.grad_x(x, y), float) - anchor.grad_x,
            grad_y=lambda x, y: np.asarray(fa.grad_y(x, y), float) - anchor.grad_y,
            region=region,
            lipschitz=None if self.lipschitz is None
            else linearized_lipschitz(self.lipschitz, anchor.grad_x),
            blocks=self.blocks, x_region=x_region, joint_step=self.joint_step,
            name=f"{self.name}-surrogate",
        )
        return problem, anchor


@dataclass(frozen=True)
class OuterRecord:
    l: int
    f: float           # DC objective at the accepted point
    L_a: float         # f plus the lambda0-penalty, the sequence that must not increase
    d: float
    improvement: float
    inner_iterations: int
    inner_bound: Optional[int]
    lipschitz: Optional[float]
    accepted: bool


@dataclass(frozen=True)
class DCTrace(SolveTrace):
    """Trace of :func:`dc_solve`; ``records`` holds one :class:`OuterRecord` per outer step."""

    inner: tuple = ()

    def monotone_violation(self):
        """Largest increase of the penalized objective between outer steps."""
        vals = [r.L_a for r in self.records]
        return max([b - a for a, b in zip(vals, vals[1:])] + [0.0])


def dc_solve(problem: DCProblem, x0=None, y0=None, schedule=PenaltySchedule(), epsilon=1e-3,
             stop_tol=1e-6, outer_tol=1e-6, patience=2, max_outer_dc=50, multiblock=False,
             inner_start="anchor", **solve_kwargs) -> DCTrace:
    """Minimize a DC objective by repeated convexification.

    Every outer step linearizes ``fb`` (and the concave parts of the
    constraints) at the current point, then runs the alternating solver from
    that point with the penalty reset to ``schedule.lambda0``.  A step is kept
    only if it does not raise ``f + lambda0 * gap``; otherwise the scheme
    stops at the current point.  It also stops once the improvement stays
    below ``outer_tol`` for ``patience`` consecutive steps, when the point no
    longer moves, or after ``max_outer_dc`` steps.

    The start point must satisfy every constraint.  When omitted, the origin
    is projected onto the convex region.
    """
    n, m = problem.n, problem.m
    if x0 is None or y0 is None:
        z = project(np.zeros(n + m), problem.region)
        x = np.clip(z[:n], 0.0, 1.0) if x0 is None else np.asarray(x0, dtype=float)
        y = z[n:] if y0 is None else np.asarray(y0, dtype=float)
    else:
        x, y = np.asarray(x0, dtype=float), np.asarray(y0, dtype=float)
    if x.shape != (n,) or y.shape != (m,):
        raise ValueError("start vectors do not match the problem dimensions")
    viol = problem.violation(np.concatenate([x, y]))
    if viol > 1e-8:
        raise InfeasibleError(f"start point violates the constraints by {viol:.3g}")

    lam0 = schedule.lambda0
    a = hard_threshold(x)
    f_val = problem.objective(x, y)
    merit = f_val + lam0 * gap(x, a)
    records = []
    inner = []
    quiet = 0
    status, converged = "max_outer", False
    runner = solve_multiblock if multiblock else solve
    for l in range(max_outer_dc):
        surrogate, anchor = problem.surrogate(x, y)
        start = dict(x0=x, y0=y, a0=a) if inner_start == "anchor" else {}
        tr = runner(surrogate, schedule, epsilon=epsilon, stop_tol=stop_tol, **start,
                    **solve_kwargs)
        inner.append(tr)
        bound = None
        if surrogate.lipschitz is not None and surrogate.lipschitz > 0 and not schedule.constant:
            bound = iteration_bound(surrogate.lipschitz, n, epsilon, lam0, schedule.rho)
        x_new, y_new, a_new = np.array(tr.x), np.array(tr.y), np.array(tr.a)
        f_new = problem.objective(x_new, y_new)
        merit_new = f_new + lam0 * gap(x_new, a_new)
        improvement = merit - merit_new
        accepted = math.isfinite(merit_new) and improvement >= -1e-12 * max(1.0, abs(merit))
        if accepted:
            move = max(float(np.max(np.abs(x_new - x), initial=0.0)),
                       float(np.max(np.abs(y_new - y), initial=0.0)))
            x, y, a, f_val, merit = x_new, y_new, a_new, f_new, min(merit, merit_new)
        records.append(OuterRecord(
            l, f_val, merit, distance(x), improvement,
            tr.iterations, bound, surrogate.lipschitz, accepted,
        ))
        if not accepted:
            logger.info("outer step %d raised the objective by %.3g; stopping", l, -improvement)
            status, converged = "no_improvement", True
            break
        if move <= stop_tol:
            status, converged = "stationary", True
            break
        quiet = quiet + 1 if improvement < outer_tol else 0
        if quiet >= patience:
            status, converged = "converged", True
            break

    for arr in (x, y, a):
        arr.setflags(write=False)
    return DCTrace(tuple(records), x, y, a, epsilon, converged, status, inner=tuple(inner))
