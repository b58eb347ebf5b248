"""Projected-gradient solver for the convex block subproblems.

Each block step of the alternating scheme minimizes a smooth convex function
over a region made of box bounds, affine equalities, affine inequalities and
general convex inequalities ``g(z) <= 0``.  Projection onto the polyhedral
part is an exact dense QP (Goldfarb-Idnani via ``quadprog``); the nonlinear
inequalities are handled by adding supporting half-spaces ``g(z_k) +
<grad g(z_k), w - z_k> <= 0`` until the projected point satisfies them.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import quadprog

from regmip.exceptions import InfeasibleError, NonFiniteError

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
BACKTRACK = 0.5
START_TOL = 1e-8


@dataclass(frozen=True)
class ConvexInequality:
    """Constraint ``fun(z) <= 0`` with ``fun`` convex and differentiable."""

    fun: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    name: str = ""


def _rows(A, b, dim):
    if A is None:
        return np.zeros((0, dim)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if A.shape[1] != dim or A.shape[0] != b.size:
        raise ValueError(f"constraint block of shape {A.shape} does not fit dim {dim}")
    return A, b


class FeasibleRegion:
    """Box, affine and convex constraints on a vector of length ``dim``.

    Parameters
    ----------
    lower, upper : array_like
        Box bounds; infinite entries are allowed.
    A_eq, b_eq : array_like, optional
        Affine equalities ``A_eq @ z == b_eq``.
    A_ub, b_ub : array_like, optional
        Affine inequalities ``A_ub @ z <= b_ub``.
    inequalities : sequence of ConvexInequality, optional
        Smooth convex constraints ``g(z) <= 0``.
    """

    def __init__(self, lower, upper, A_eq=None, b_eq=None, A_ub=None, b_ub=None,
                 inequalities: Sequence[ConvexInequality] = ()):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float)).copy()
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float)).copy()
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower and upper must be 1-d vectors of equal length")
        if np.any(self.lower > self.upper):
            raise ValueError("box bounds require lower <= upper componentwise")
        dim = self.lower.size
        self.A_eq, self.b_eq = _rows(A_eq, b_eq, dim)
        self.A_ub, self.b_ub = _rows(A_ub, b_ub, dim)
        self.inequalities = tuple(inequalities)
        self._reduce_equalities()

    @property
    def dim(self):
        return self.lower.size

    @classmethod
    def box(cls, lower, upper):
        return cls(lower, upper)

    def _reduce_equalities(self):
        # Orthonormal, full-rank rows for the QP; dependent rows break quadprog.
        A, b = self.A_eq, self.b_eq
        if A.shape[0] == 0:
            self._Q, self._q = A, b
            return
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        r = int(np.sum(s > s[0] * 1e-12 * max(A.shape))) if s.size and s[0] > 0 else 0
        Ur = U[:, :r]
        resid = b - Ur @ (Ur.T @ b)
        if np.linalg.norm(resid) > 1e-9 * (1.0 + np.linalg.norm(b)):
            raise InfeasibleError("affine equalities are inconsistent")
        self._Q = Vt[:r]
        self._q = (Ur.T @ b) / s[:r]

    def tangent(self, v):
        """Component of ``v`` parallel to the affine hull of the equalities."""
        v = np.asarray(v, dtype=float)
        if self._Q.shape[0] == 0:
            return v
        return v - self._Q.T @ (self._Q @ v)

    def diameter(self):
        width = self.upper - self.lower
        return float(np.linalg.norm(width)) if np.all(np.isfinite(width)) else np.inf

    def violation(self, z):
        """Largest constraint violation at ``z`` (0 when feasible)."""
        z = np.asarray(z, dtype=float)
        v = 0.0
        if z.size:
            v = max(v, float(np.max(self.lower - z, initial=0.0)),
                    float(np.max(z - self.upper, initial=0.0)))
        if self.A_eq.shape[0]:
            v = max(v, float(np.max(np.abs(self.A_eq @ z - self.b_eq))))
        if self.A_ub.shape[0]:
            v = max(v, float(np.max(self.A_ub @ z - self.b_ub, initial=0.0)))
        for g in self.inequalities:
            v = max(v, float(g.fun(z)))
        return v

    def contains(self, z, tol=1e-8):
        return self.violation(z) <= tol

    def slice(self, idx, z):
        """Restrict the region to coordinates ``idx`` with the rest fixed at ``z``.

        Rows that no longer involve any free coordinate are dropped.
        """
        idx = np.asarray(idx, dtype=int)
        z = np.asarray(z, dtype=float).copy()
        fixed = np.setdiff1d(np.arange(self.dim), idx)

        def cut(A, b):
            if A.shape[0] == 0:
                return None, None
            Af = A[:, idx]
            bf = b - A[:, fixed] @ z[fixed]
            keep = np.max(np.abs(Af), axis=1, initial=0.0) > 1e-14
            if not keep.any():
                return None, None
            return Af[keep], bf[keep]

        A_eq, b_eq = cut(self.A_eq, self.b_eq)
        A_ub, b_ub = cut(self.A_ub, self.b_ub)
        ineqs = [_sliced_inequality(g, idx, z) for g in self.inequalities]
        return FeasibleRegion(self.lower[idx], self.upper[idx], A_eq, b_eq, A_ub, b_ub, ineqs)

    def with_inequalities(self, inequalities):
        """Copy of the region with the nonlinear inequalities replaced."""
        return FeasibleRegion(self.lower, self.upper, self.A_eq, self.b_eq,
                              self.A_ub, self.b_ub, inequalities)

    def __repr__(self):
        return (f"FeasibleRegion(dim={self.dim}, eq={self.A_eq.shape[0]}, "
                f"ub={self.A_ub.shape[0]}, convex={len(self.inequalities)})")


def _sliced_inequality(g, idx, z):
    base = z.copy()

    def embed(w):
        full = base.copy()
        full[idx] = w
        return full

    return ConvexInequality(lambda w: g.fun(embed(w)),
                            lambda w: np.asarray(g.grad(embed(w)), dtype=float)[idx],
                            g.name)


@dataclass
class SubproblemResult:
    minimizer: np.ndarray
    value: float
    kkt_residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


def _qp_project(p, region, cuts_A, cuts_b):
    """Exact Euclidean projection onto the polyhedral part plus cuts."""
    n = p.size
    lo, hi = region.lower, region.upper
    fixed = lo == hi
    free = ~fixed
    z = np.where(fixed, lo, p)
    if not free.any():
        return z
    zf = z[fixed]

    blocks_C, blocks_b = [], []
    Q, q = region._Q, region._q
    meq = 0
    if Q.shape[0]:
        Qf = Q[:, free]
        qf = q - Q[:, fixed] @ zf
        keep = np.max(np.abs(Qf), axis=1) > 1e-14
        if np.any(np.abs(qf[~keep]) > 1e-9):
            raise InfeasibleError("fixed coordinates violate an equality")
        if keep.any():
            # re-orthonormalize after dropping fixed columns
            U, s, Vt = np.linalg.svd(Qf[keep], full_matrices=False)
            r = int(np.sum(s > s[0] * 1e-12 * max(Qf.shape)))
            blocks_C.append(Vt[:r])
            blocks_b.append((U[:, :r].T @ qf[keep]) / s[:r])
            meq = r
    ub_A = [region.A_ub] if region.A_ub.shape[0] else []
    ub_b = [region.b_ub] if region.A_ub.shape[0] else []
    if cuts_A:
        ub_A.append(np.array(cuts_A))
        ub_b.append(np.array(cuts_b))
    if ub_A:
        A = np.vstack(ub_A)
        b = np.concatenate(ub_b)
        Af = A[:, free]
        bf = b - A[:, fixed] @ zf
        keep = np.max(np.abs(Af), axis=1) > 1e-14
        if np.any(bf[~keep] < -1e-9):
            raise InfeasibleError("fixed coordinates violate an inequality")
        blocks_C.append(-Af[keep])
        blocks_b.append(-bf[keep])
    lf, hf = lo[free], hi[free]
    nf = int(free.sum())
    eye = np.eye(nf)
    lo_ok = np.isfinite(lf)
    hi_ok = np.isfinite(hf)
    blocks_C += [eye[lo_ok], -eye[hi_ok]]
    blocks_b += [lf[lo_ok], -hf[hi_ok]]

    C = np.vstack(blocks_C) if blocks_C else np.zeros((0, nf))
    bvec = np.concatenate(blocks_b) if blocks_b else np.zeros(0)
    pf = p[free]
    if C.shape[0] == 0:
        out = pf
    else:
        try:
            out = quadprog.solve_qp(np.eye(nf), pf, C.T.copy(), bvec, meq)[0]
        except ValueError as exc:
            raise InfeasibleError(f"projection QP failed: {exc}") from exc
    out = np.clip(out, lf, hf)
    z = z.copy()
    z[free] = out
    return z


def project(point, region: FeasibleRegion, tol=1e-8, max_cycles=100):
    """Euclidean projection of ``point`` onto ``region``.

    Convex inequalities are enforced to within ``tol``.

    Raises
    ------
    InfeasibleError
        If the polyhedral part is empty or the cutting-plane loop does not
        reach ``tol`` within ``max_cycles`` rounds.
    """
    p = np.asarray(point, dtype=float)
    if p.shape != (region.dim,):
        raise ValueError(f"point of shape {p.shape} does not match region dim {region.dim}")
    if region.violation(p) <= 1e-14:
        return p.copy()
    if region.A_eq.shape[0] == 0 and region.A_ub.shape[0] == 0 and not region.inequalities:
        return np.clip(p, region.lower, region.upper)

    cuts_A, cuts_b = [], []
    for _ in range(max_cycles):
        z = _qp_project(p, region, cuts_A, cuts_b)
        worst = 0.0
        for g in region.inequalities:
            gz = float(g.fun(z))
            if gz > tol:
                worst = max(worst, gz)
                dg = np.asarray(g.grad(z), dtype=float)
                cuts_A.append(dg)
                cuts_b.append(dg @ z - gz)
        if worst == 0.0:
            return z
    raise InfeasibleError(
        f"projection did not reach tolerance {tol:g} after {max_cycles} cutting-plane rounds; "
        "the region is probably empty"
    )


def minimize(fun, grad, region: FeasibleRegion, start, tol=1e-8, max_iter=10_000,
             callback=None):
    """Minimize a smooth convex function over ``region`` by projected gradient.

    Steps follow a Barzilai-Borwein length, capped so a single step never
    travels much more than the region diameter, followed by Armijo
    backtracking along the feasible segment ``x + tau * (P(x - s g) - x)``.
    Every accepted point is a convex combination of feasible points, and the
    objective never increases.

    Parameters
    ----------
    fun, grad : callable
        Objective and its gradient.
    region : FeasibleRegion
    start : array_like
        Feasible starting point (violation at most 1e-8).
    tol : float
        Target for the stationarity residual ``||x - P(x - grad f(x))||_inf``.
    max_iter : int
    callback : callable, optional
        Called as ``callback(x, fx)`` after each accepted step.

    Returns
    -------
    SubproblemResult
        ``converged`` is False when ``max_iter`` ran out or the line search
        stalled before the residual reached ``tol``.
    """
    x = np.asarray(start, dtype=float).copy()
    viol = region.violation(x)
    if viol > START_TOL:
        raise InfeasibleError(f"start point violates the region by {viol:.3g}")
    if x.size == 0:
        fx = float(fun(x))
        return SubproblemResult(x, fx, 0.0, 0, True, [fx])

    fx = float(fun(x))
    if not np.isfinite(fx):
        raise NonFiniteError(f"objective is {fx} at the start point", x.copy())
    g = np.asarray(grad(x), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient is not finite at the start point", x.copy())

    diam = region.diameter()
    reach = 10.0 * diam if np.isfinite(diam) else 1e8
    # step lengths are sized by the gradient component along the equality
    # hull; the normal component is removed by the projection anyway
    gnorm = np.linalg.norm(region.tangent(g))
    step = 1.0 / max(gnorm, 1e-12) if gnorm > 0 else 1.0
    history = [fx]
    residual = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        residual = float(np.max(np.abs(x - project(x - g, region, tol))))
        if residual <= tol:
            converged = True
            it -= 1
            break
        gnorm = np.linalg.norm(region.tangent(g))
        s_max = reach / max(gnorm, 1e-300)
        step = min(max(step, 1e-12 * s_max), s_max)
        d = project(x - step * g, region, tol) - x
        slope = float(g @ d)
        if not slope < 0:
            d = project(x - g, region, tol) - x
            slope = float(g @ d)
            if not slope < 0:
                break
        tau = 1.0
        while True:
            trial = x + tau * d
            ft = float(fun(trial))
            if np.isnan(ft):
                raise NonFiniteError("objective is nan during line search", trial)
            if ft <= fx + ARMIJO * tau * slope:
                break
            tau *= BACKTRACK
            if tau < 1e-16:
                break
        if tau < 1e-16:
            break
        g_new = np.asarray(grad(trial), dtype=float)
        if not np.all(np.isfinite(g_new)):
            raise NonFiniteError("gradient is not finite", trial)
        sk = trial - x
        yk = g_new - g
        sy = float(sk @ yk)
        step = float(sk @ sk) / sy if sy > 0 else s_max
        x, fx, g = trial, ft, g_new
        history.append(fx)
        if callback is not None:
            callback(x, fx)
    if not converged:
        logger.debug("projected gradient stopped at residual %.3g after %d iterations",
                     residual, it)
    return SubproblemResult(x, fx, residual, it, converged, history)
