"""Binary relaxation primitives.

A binary vector ``x in {0,1}^n`` is relaxed to ``x in [0,1]^n`` and paired
with an auxiliary vector ``a`` of the same shape.  The bilinear gap

    n - <x, a> - <1 - x, 1 - a>

is nonnegative on the unit box and vanishes exactly when ``x == a`` and both
are binary, so ``lam * gap`` acts as an exact penalty on non-binary ``x``.
"""

from typing import NamedTuple

import numpy as np

#: Values this far outside [0, 1] are clamped silently; further is an error.
CLAMP_TOL = 1e-12


class PenaltyValue(NamedTuple):
    lam: float
    value: float

    def __float__(self):
        return float(self.value)


def as_relaxed(x, n=None):
    """Validate ``x`` as a vector in [0, 1]^n and return a clamped float copy.

    Parameters
    ----------
    x : array_like
        Candidate vector.
    n : int, optional
        Required dimension.

    Raises
    ------
    ValueError
        If ``x`` is not one-dimensional, has the wrong length, contains
        non-finite values, or leaves the unit box by more than ``CLAMP_TOL``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {x.shape}")
    if n is not None and x.size != n:
        raise ValueError(f"expected dimension {n}, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("relaxed vector contains non-finite values")
    if x.size and (x.min() < -CLAMP_TOL or x.max() > 1.0 + CLAMP_TOL):
        raise ValueError(
            f"relaxed vector leaves [0, 1]: min={x.min():.3g}, max={x.max():.3g}"
        )
    return np.clip(x, 0.0, 1.0)


def hard_threshold(x):
    """Round each entry to the nearest of {0, 1}; exactly 0.5 rounds up."""
    x = as_relaxed(x)
    return np.floor(x + 0.5)


def distance(x):
    """L1 distance from ``x`` to its hard threshold.

    Evaluated as ``n - sum(max(x_i, 1 - x_i))``.
    """
    x = as_relaxed(x)
    return float(x.size - np.maximum(x, 1.0 - x).sum())


def gap(x, a):
    # n - <x,a> - <1-x,1-a>, written as sum(x + a - 2xa) to avoid cancellation
    # against n for large n.
    return float(np.sum(x + a - 2.0 * x * a))


def gap_grad(a):
    """Gradient of the gap with respect to ``x`` (it is affine in ``x``)."""
    return 1.0 - 2.0 * np.asarray(a, dtype=float)


def penalty(x, a, lam):
    """Evaluate ``lam * (n - <x, a> - <1 - x, 1 - a>)``.

    Raises
    ------
    ValueError
        On a dimension mismatch or a non-positive ``lam``.
    """
    x = as_relaxed(x)
    a = as_relaxed(a)
    if x.shape != a.shape:
        raise ValueError(f"dimension mismatch: x has {x.size}, a has {a.size}")
    if not lam > 0:
        raise ValueError(f"penalty coefficient must be positive, got {lam}")
    # the gap is a sum of nonnegative terms x(1-a) + a(1-x) on the box
    return PenaltyValue(float(lam), float(lam) * max(gap(x, a), 0.0))


def in_S(x, a, tol=0.0):
    """True when ``(x, a)`` lies on the zero set of the gap, up to ``tol``."""
    return penalty(x, a, 1.0).value <= tol


def update_a(x):
    """Closed-form minimizer of the gap over ``a in [0,1]^n`` for fixed ``x``.

    Minimizing the gap in ``a`` is the linear program
    ``max <a, 2x - 1>`` over the unit box, solved coordinatewise at a corner.
    Ties at ``x_i = 0.5`` go to 1 so the result equals ``hard_threshold(x)``.
    """
    return hard_threshold(x)
