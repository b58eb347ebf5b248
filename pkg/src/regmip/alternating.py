"""Alternating minimization of the penalized objective.

For a problem ``min f(x, y)`` with ``x`` binary, the relaxed objective is

    L_lam(x, y, a) = f(x, y) + lam * (n - <x, a> - <1 - x, 1 - a>)

over ``x, a in [0, 1]^n``.  One outer iteration minimizes ``L`` over ``y``
(block by block when ``y`` is split), then over ``x``, then over ``a`` in
closed form, and finally multiplies ``lam`` by ``rho``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from regmip.exceptions import (
    InfeasibleError,
    NonFiniteError,
    PenaltyOverflowError,
    SolverError,
)
from regmip.penalty import distance, gap, gap_grad, update_a
from regmip.subsolver import FeasibleRegion, minimize, project

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Block:
    """A named group of continuous coordinates, given as indices into ``y``."""

    name: str
    indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))


@dataclass
class MixedProblem:
    """Objective, gradients and feasible region of a relaxed mixed problem.

    The region lives on the stacked vector ``z = (x, y)`` of length ``n + m``.

    Attributes
    ----------
    n, m : int
        Sizes of the binary and continuous blocks.
    fun : callable
        ``fun(x, y) -> float``.
    grad_x, grad_y : callable
        Partial gradients, each ``(x, y) -> ndarray``.
    region : FeasibleRegion
        Joint feasible set used by the continuous block steps.
    lipschitz : float, optional
        Declared Lipschitz constant of ``f`` in ``x`` over the unit box.
    blocks : sequence of Block
        Partition of ``y`` for multi-block sweeps.  Empty means one block.
    x_region : FeasibleRegion, optional
        Region used by the x-step; defaults to ``region``.  Problems whose
        continuous variables are auxiliaries defined by equalities in ``x``
        pass the constraints on ``x`` alone here, since slicing those
        equalities at fixed ``y`` would pin ``x``.
    joint_step : bool
        Update ``(x, y)`` together in the x-step.  Only valid when ``f`` is
        jointly convex.
    """

    n: int
    m: int
    fun: Callable
    grad_x: Callable
    grad_y: Callable
    region: FeasibleRegion
    lipschitz: Optional[float] = None
    blocks: Sequence[Block] = ()
    x_region: Optional[FeasibleRegion] = None
    joint_step: bool = False
    name: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("the binary block needs n >= 1")
        if self.m < 0:
            raise ValueError("m must be nonnegative")
        if self.region.dim != self.n + self.m:
            raise ValueError(f"region has dim {self.region.dim}, expected n + m = {self.n + self.m}")
        if self.x_region is not None and self.x_region.dim != self.n + self.m:
            raise ValueError("x_region must live on the joint (x, y) space")
        if self.blocks:
            seen = sorted(i for b in self.blocks for i in b.indices)
            if seen != list(range(self.m)):
                raise ValueError("blocks must partition the continuous coordinates")

    def split(self, z):
        return z[: self.n], z[self.n:]

    def lagrangian(self, x, y, a, lam):
        return float(self.fun(x, y)) + lam * gap(x, a)


@dataclass(frozen=True)
class PenaltySchedule:
    """Geometric schedule ``lam_t = rho**t * lambda0``, capped at ``cap * lambda0``."""

    lambda0: float = 1.0
    rho: float = 2.0
    cap: float = 1e12
    constant: bool = False

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise ValueError(f"lambda0 must be positive, got {self.lambda0}")
        if self.constant:
            if self.rho != 1.0:
                raise ValueError("a constant schedule has rho == 1")
        elif not self.rho > 1:
            raise ValueError(f"rho must exceed 1, got {self.rho}")

    @classmethod
    def fixed(cls, lam):
        """Schedule that keeps ``lam`` for every iteration."""
        return cls(lambda0=lam, rho=1.0, constant=True)

    def lam(self, t):
        if self.constant:
            return self.lambda0
        # log-domain comparison so large t never overflows
        if t * math.log(self.rho) >= math.log(self.cap):
            return self.lambda0 * self.cap
        return self.lambda0 * self.rho ** t

    def at_cap(self, t):
        return not self.constant and t * math.log(self.rho) >= math.log(self.cap)


@dataclass(frozen=True)
class IterationRecord:
    t: int
    lam: float
    L_start: float
    L_y: float
    L_x: float
    L_a: float
    f: float
    d: float
    dx: float
    dy: float
    da: float
    subsolver_converged: bool


@dataclass(frozen=True)
class SolveTrace:
    records: tuple
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    epsilon: float
    converged: bool
    status: str
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self):
        return len(self.records)

    @property
    def binary(self):
        return distance(self.x) <= self.epsilon

    @property
    def f(self):
        return self.records[-1].f if self.records else float("nan")

    @property
    def L(self):
        return self.records[-1].L_a if self.records else float("nan")

    def first_binary(self, epsilon=None):
        """Index of the first iteration whose post-x-step iterate has ``d(x) <= epsilon``."""
        eps = self.epsilon if epsilon is None else epsilon
        for r in self.records:
            if r.d <= eps:
                return r.t
        return None

    def monotone_violation(self):
        """Largest increase of L inside any y/x/a triple (0 when monotone)."""
        worst = 0.0
        for r in self.records:
            worst = max(worst, r.L_x - r.L_y, r.L_a - r.L_x)
        return worst


def iteration_bound(L, n, epsilon, lambda0, rho):
    """Outer iterations after which ``d(x) <= epsilon`` is guaranteed.

    ``ceil((log(L sqrt(n)) - log(epsilon lambda0)) / log(rho))``, floored at 0.
    """
    if not (L > 0 and n > 0 and epsilon > 0 and lambda0 > 0 and rho > 1):
        raise ValueError("iteration_bound needs positive L, n, epsilon, lambda0 and rho > 1")
    ratio = math.log(L * math.sqrt(n) / (epsilon * lambda0)) / math.log(rho)
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9:
        ratio = nearest
    return max(0, math.ceil(ratio))


def lambda_threshold(L):
    """Penalty level above which the x-step returns a binary point.

    Any ``lam > L`` works when ``f`` is ``L``-Lipschitz in ``x`` on the unit box.
    """
    if not L > 0:
        raise ValueError("L must be positive")
    return float(L)


def convexity_violation(fun, lower, upper, center, rng, samples=20, spread=1.0):
    """Largest midpoint-convexity defect of ``fun`` on random segments.

    Segment endpoints are drawn in the box ``[lower, upper]``; infinite sides
    are replaced by ``center +- spread``.
    """
    lo = np.where(np.isfinite(lower), lower, center - spread)
    hi = np.where(np.isfinite(upper), upper, center + spread)
    worst = 0.0
    for _ in range(samples):
        p = rng.uniform(lo, hi)
        q = rng.uniform(lo, hi)
        fp, fq, fm = fun(p), fun(q), fun(0.5 * (p + q))
        scale = max(1.0, abs(fp), abs(fq))
        worst = max(worst, (fm - 0.5 * (fp + fq)) / scale)
    return worst


def _reraise(exc, context):
    if isinstance(exc, NonFiniteError):
        raise NonFiniteError(f"{context}: {exc}", exc.point) from exc
    raise type(exc)(f"{context}: {exc}") from exc


class _Sweeper:
    """Holds the sliced subproblems for one solve."""

    def __init__(self, problem, blocks, sub_tol, sub_max_iter, debug, rng):
        self.p = problem
        self.blocks = blocks
        self.sub_tol = sub_tol
        self.sub_max_iter = sub_max_iter
        self.debug = debug
        self.rng = rng
        self.all_converged = True

    def _run(self, fun, grad, region, start, label):
        w0 = start if region.contains(start, 1e-9) else project(start, region, self.sub_tol)
        if self.debug:
            viol = convexity_violation(fun, region.lower, region.upper, w0, self.rng)
            if viol >= 1e-6:
                logger.warning("%s objective fails midpoint convexity by %.3g", label, viol)
        res = minimize(fun, grad, region, w0, tol=self.sub_tol, max_iter=self.sub_max_iter)
        if not res.converged:
            self.all_converged = False
            logger.debug("%s subproblem stopped at residual %.3g", label, res.kkt_residual)
        return res.minimizer

    def y_step(self, x, y, a, lam):
        p = self.p
        y = y.copy()
        for block in self.blocks:
            idx = np.asarray(block.indices, dtype=int)
            z = np.concatenate([x, y])
            region = p.region.slice(p.n + idx, z)

            def fun(w, idx=idx):
                yy = y.copy()
                yy[idx] = w
                return p.fun(x, yy)

            def grad(w, idx=idx):
                yy = y.copy()
                yy[idx] = w
                return np.asarray(p.grad_y(x, yy), dtype=float)[idx]

            y[idx] = self._run(fun, grad, region, y[idx], f"{block.name}-step")
        return y

    def x_step(self, x, y, a, lam):
        p = self.p
        n = p.n
        base = p.x_region if p.x_region is not None else p.region
        z = np.concatenate([x, y])
        lin = lam * gap_grad(a)
        if p.joint_step and p.m:
            idx = np.arange(n + p.m)
            region = base.slice(idx, z)
            region.lower[:n] = np.maximum(region.lower[:n], 0.0)
            region.upper[:n] = np.minimum(region.upper[:n], 1.0)

            def fun(w):
                return p.fun(w[:n], w[n:]) + lam * gap(w[:n], a)

            def grad(w):
                gx = np.asarray(p.grad_x(w[:n], w[n:]), dtype=float) + lin
                return np.concatenate([gx, np.asarray(p.grad_y(w[:n], w[n:]), dtype=float)])

            w = self._run(fun, grad, region, z, "joint-step")
            return np.clip(w[:n], 0.0, 1.0), w[n:]

        region = base.slice(np.arange(n), z)
        region.lower[:] = np.maximum(region.lower, 0.0)
        region.upper[:] = np.minimum(region.upper, 1.0)

        def fun(w):
            return p.fun(w, y) + lam * gap(w, a)

        def grad(w):
            return np.asarray(p.grad_x(w, y), dtype=float) + lin

        w = self._run(fun, grad, region, x, "x-step")
        return np.clip(w, 0.0, 1.0), y


def _alternate(problem, blocks, schedule, epsilon, stop_tol, max_outer, x0, y0, a0,
               sub_tol, sub_max_iter, debug, seed):
    p = problem
    n, m = p.n, p.m
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float).copy()
    a = np.zeros(n) if a0 is None else np.asarray(a0, dtype=float).copy()
    if x.shape != (n,) or y.shape != (m,) or a.shape != (n,):
        raise ValueError("start vectors do not match the problem dimensions")

    z = np.concatenate([x, y])
    r = p.region
    box = FeasibleRegion(
        np.concatenate([np.maximum(r.lower[:n], 0.0), r.lower[n:]]),
        np.concatenate([np.minimum(r.upper[:n], 1.0), r.upper[n:]]),
        r.A_eq, r.b_eq, r.A_ub, r.b_ub, r.inequalities,
    )
    if not box.contains(z, 1e-9):
        try:
            z = project(z, box, sub_tol)
        except InfeasibleError as exc:
            _reraise(exc, "initial point")
        logger.info("start point infeasible; using its projection onto the region")
        x, y = np.clip(z[:n], 0.0, 1.0), z[n:]

    sweeper = _Sweeper(p, blocks, sub_tol, sub_max_iter, debug, np.random.default_rng(seed))
    records = []
    status = "max_outer"
    converged = False

    def lagr(x, y, a, lam, label, t):
        val = p.lagrangian(x, y, a, lam)
        if not math.isfinite(val):
            raise NonFiniteError(f"outer iteration {t}: L is {val} after the {label}",
                                 np.concatenate([x, y]))
        return val

    for t in range(max_outer):
        lam = schedule.lam(t)
        L_start = lagr(x, y, a, lam, "previous sweep", t)
        try:
            y_new = sweeper.y_step(x, y, a, lam) if m else y
            L_y = lagr(x, y_new, a, lam, "y-step", t)
            x_new, y_new = sweeper.x_step(x, y_new, a, lam)
        except (InfeasibleError, NonFiniteError, SolverError) as exc:
            _reraise(exc, f"outer iteration {t}")
        L_x = lagr(x_new, y_new, a, lam, "x-step", t)
        d = distance(x_new)
        a_new = update_a(x_new)
        L_a = lagr(x_new, y_new, a_new, lam, "a-step", t)
        dx = float(np.max(np.abs(x_new - x), initial=0.0))
        dy = float(np.max(np.abs(y_new - y), initial=0.0))
        da = float(np.max(np.abs(a_new - a), initial=0.0))
        records.append(IterationRecord(
            t, lam, L_start, L_y, L_x, L_a, float(p.fun(x_new, y_new)), d, dx, dy, da,
            sweeper.all_converged,
        ))
        sweeper.all_converged = True
        x, y, a = x_new, y_new, a_new
        if max(dx, dy, da) <= stop_tol and d <= epsilon:
            status, converged = "converged", True
            break
        if schedule.at_cap(t) and d > epsilon:
            raise PenaltyOverflowError(
                f"penalty reached its cap {lam:.3g} at iteration {t} with d(x) = {d:.3g} > {epsilon:g}"
            )

    for arr in (x, y, a):
        arr.setflags(write=False)
    return SolveTrace(tuple(records), x, y, a, epsilon, converged, status)


def solve(problem: MixedProblem, schedule: PenaltySchedule = PenaltySchedule(), epsilon=1e-3,
          stop_tol=1e-6, max_outer=200, x0=None, y0=None, a0=None, sub_tol=1e-8,
          sub_max_iter=10_000, debug=False, seed=0):
    """Run the y/x/a sweep with a geometrically growing penalty.

    The continuous block is updated as one piece.  Iteration stops when the
    sup-norm change of ``x``, ``y`` and ``a`` is at most ``stop_tol`` and
    ``d(x) <= epsilon``, or after ``max_outer`` sweeps.

    Returns
    -------
    SolveTrace

    Raises
    ------
    PenaltyOverflowError
        If the penalty reaches its cap while ``x`` is still fractional.
    InfeasibleError, NonFiniteError
        From a block step, with the outer iteration in the message.
    """
    blocks = (Block("y", range(problem.m)),) if problem.m else ()
    return _alternate(problem, blocks, schedule, epsilon, stop_tol, max_outer, x0, y0, a0,
                      sub_tol, sub_max_iter, debug, seed)


def solve_multiblock(problem: MixedProblem, schedule: PenaltySchedule = PenaltySchedule(),
                     epsilon=1e-3, stop_tol=1e-6, max_outer=200, order=None, x0=None, y0=None,
                     a0=None, sub_tol=1e-8, sub_max_iter=10_000, debug=False, seed=0):
    """Like :func:`solve` but with one continuous step per block of ``problem.blocks``.

    ``order`` lists block names and defaults to the declared order.
    """
    blocks = tuple(problem.blocks) or ((Block("y", range(problem.m)),) if problem.m else ())
    if order is not None:
        by_name = {b.name: b for b in blocks}
        if sorted(order) != sorted(by_name):
            raise ValueError(f"order {order} does not name each block once")
        blocks = tuple(by_name[name] for name in order)
    return _alternate(problem, blocks, schedule, epsilon, stop_tol, max_outer, x0, y0, a0,
                      sub_tol, sub_max_iter, debug, seed)


def empirical_omega(problem, lambdas, solver=solve, **kwargs):
    """Estimate ``omega(lam) = min L_lam`` on a grid of fixed penalty levels.

    Each level is solved with a constant schedule.  Because a heuristic run
    can miss the minimizer, the final iterates of all runs are pooled and
    ``omega(lam)`` is taken as the smallest ``L_lam`` over the pool.

    Returns
    -------
    runs : ndarray
        Final ``L`` of the run at each level.
    pooled : ndarray
        Pooled estimate at each level.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    finals = []
    runs = []
    for lam in lambdas:
        tr = solver(problem, PenaltySchedule.fixed(lam), **kwargs)
        finals.append((tr.x, tr.y, tr.a))
        runs.append(tr.L)
    pooled = np.array([
        min(problem.lagrangian(x, y, a, lam) for x, y, a in finals) for lam in lambdas
    ])
    return np.array(runs), pooled
