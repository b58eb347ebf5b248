"""RAT selection in a two-technology small-cell network.

``I`` users are assigned to ``K`` small base stations (SBSs); each SBS runs
either RAT-1 (WiFi-like, every RAT-1 user gets the same throughput, the
inverse of the summed inverse rates) or RAT-2 (OFDMA-like, a user gets its
own rate divided by the RAT-2 population).  The goal is the weighted
aggregate throughput ``sum_i alpha_i w_i`` subject to

    C1  per-RAT throughput caps        sum_{i in RAT m} w_i <= w_max[m]
    C2  per-RAT population caps        |RAT m| <= N_max[m]
    C3  one SBS per user
    C4  per-SBS population caps        |SBS k| <= K_max[k]
    C5  binary assignment.

The optimization variables are ``x`` (flattened ``I x K``, user-major),
``u`` (per-user RAT-2 rate, ``I`` entries) and ``v = (v1, v2)`` (RAT-1 sum of
inverse rates and RAT-2 population).  Rates are stored in bits/s; problem
builders work in units of ``instance.rate_unit`` bits/s.
"""

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from regmip.alternating import Block, MixedProblem
from regmip.dc import ConvexPart, DCFunction, DCProblem
from regmip.exceptions import InfeasibleError
from regmip.subsolver import FeasibleRegion

#: Lower bound on v1 and v2 in the relaxed problems (working units).
V_FLOOR = 1e-6
ORACLE_LIMIT = 10**7
FORMAT_VERSION = 1


class InstanceFormatError(ValueError):
    """An instance file could not be parsed."""


@dataclass
class ChannelConfig:
    """Radio parameters for :func:`generate_instance`.

    ``rayleigh_scale`` defaults to ``1/sqrt(2)``, the scale for which the
    fading magnitude has unit second moment.  ``sbs_positions`` defaults to
    ``radius/2`` from the cell centre, evenly spaced in angle (the two-SBS
    case sits at ``(+-radius/2, 0)``).
    """

    radius: float = 50.0
    pathloss_exponent: float = 3.0
    bandwidth: float = 180e3
    noise_dbm_hz: float = -174.0
    power_dbm: float = 20.0
    rayleigh_scale: float = 1.0 / math.sqrt(2.0)
    min_distance: float = 1.0
    rate_unit: float = 1e6
    sbs_positions: Optional[list] = None

    def __post_init__(self):
        for name in ("radius", "bandwidth", "rayleigh_scale", "min_distance", "rate_unit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not math.isfinite(self.power_dbm):
            raise ValueError("power_dbm must be finite")


@dataclass
class RatInstance:
    rates: np.ndarray
    rat_of: np.ndarray
    alpha: np.ndarray
    n_max: np.ndarray
    w_max: np.ndarray
    k_max: np.ndarray
    rate_unit: float = 1.0
    config: Optional[ChannelConfig] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rates = np.atleast_2d(np.asarray(self.rates, dtype=float))
        I, K = self.rates.shape
        self.rat_of = np.asarray(self.rat_of, dtype=int).reshape(K)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(I)
        self.n_max = np.asarray(self.n_max, dtype=int).reshape(2)
        self.w_max = np.asarray(self.w_max, dtype=float).reshape(2)
        self.k_max = np.asarray(self.k_max, dtype=int).reshape(K)
        if not np.all(np.isfinite(self.rates)) or np.any(self.rates <= 0):
            raise ValueError("rates must be positive and finite")
        if np.any(self.alpha <= 0):
            raise ValueError("fairness weights alpha must be positive")
        if not set(self.rat_of.tolist()) <= {1, 2}:
            raise ValueError("rat_of entries must be 1 or 2")
        if not (np.any(self.rat_of == 1) and np.any(self.rat_of == 2)):
            raise ValueError("both RAT classes need at least one SBS")
        if not self.rate_unit > 0:
            raise ValueError("rate_unit must be positive")
        self._check_caps()

    @property
    def I(self):
        return self.rates.shape[0]

    @property
    def K(self):
        return self.rates.shape[1]

    @property
    def K1(self):
        return np.flatnonzero(self.rat_of == 1)

    @property
    def K2(self):
        return np.flatnonzero(self.rat_of == 2)

    def _check_caps(self):
        I = self.I
        if np.any(self.n_max < 0) or np.any(self.k_max < 0):
            raise InfeasibleError("population caps must be nonnegative")
        if np.any(self.w_max <= 0):
            m = int(np.flatnonzero(self.w_max <= 0)[0]) + 1
            raise InfeasibleError(f"throughput cap w_max for RAT-{m} is not positive (C1)")
        if self.k_max.sum() < I:
            raise InfeasibleError(
                f"per-SBS caps K_max sum to {self.k_max.sum()} < {I} users (C4)")
        if self.n_max.sum() < I:
            raise InfeasibleError(
                f"per-RAT caps N_max sum to {self.n_max.sum()} < {I} users (C2)")
        for m, ks in ((1, self.K1), (2, self.K2)):
            if min(self.k_max[ks].sum(), self.n_max[m - 1]) <= 0 and self.n_max[2 - m] < I:
                raise InfeasibleError(f"RAT-{m} cannot take any user but must (C2/C4)")
        if self.K ** I <= 10**5:
            if exhaustive_oracle(self)[0] is None:
                raise InfeasibleError("no assignment satisfies C1-C4")
        elif greedy_assignment(self) is None:
            raise InfeasibleError("greedy search found no assignment satisfying C1-C4")

    def working_rates(self):
        return self.rates / self.rate_unit


# ---------------------------------------------------------------------------
# assignments and throughput


def as_matrix(instance, x):
    return np.asarray(x, dtype=float).reshape(instance.I, instance.K)


def aux_variables(instance, x):
    """Auxiliary variables ``(u, v1, v2)`` implied by ``x`` (working units)."""
    X = as_matrix(instance, x)
    r = instance.working_rates()
    K1, K2 = instance.K1, instance.K2
    v1 = float(np.sum(X[:, K1] / r[:, K1]))
    v2 = float(np.sum(X[:, K2]))
    u = np.sum(X[:, K2] * r[:, K2], axis=1)
    return u, v1, v2


def throughput(instance, x):
    """Per-user throughput and weighted aggregate, both in bits/s.

    Raises
    ------
    ZeroDivisionError
        If users are assigned to a RAT whose load denominator is zero.
    """
    X = as_matrix(instance, x)
    r = instance.rates
    K1, K2 = instance.K1, instance.K2
    s1 = X[:, K1].sum(axis=1)
    s2 = X[:, K2].sum(axis=1)
    v1 = float(np.sum(X[:, K1] / r[:, K1]))
    v2 = float(np.sum(X[:, K2]))
    w = np.zeros(instance.I)
    if np.any(s1 > 0):
        if v1 <= 0:
            raise ZeroDivisionError("RAT-1 users present but RAT-1 load is zero")
        w += s1 / v1
    if np.any(s2 > 0):
        if v2 <= 0:
            raise ZeroDivisionError("RAT-2 users present but RAT-2 population is zero")
        w += s2 * np.sum(X[:, K2] * r[:, K2], axis=1) / v2
    return w, float(instance.alpha @ w)


def validate_assignment(instance, x, tol=1e-9):
    """List the constraints C1-C5 that ``x`` violates (empty when feasible)."""
    X = as_matrix(instance, x)
    problems = []
    if not np.all((X == 0) | (X == 1)):
        problems.append("C5: entries are not binary")
        return problems
    if not np.all(X.sum(axis=1) == 1):
        bad = np.flatnonzero(X.sum(axis=1) != 1).tolist()
        problems.append(f"C3: users {bad} are not served by exactly one SBS")
        return problems
    cols = X.sum(axis=0)
    for k in np.flatnonzero(cols > instance.k_max):
        problems.append(f"C4: SBS {k} serves {int(cols[k])} > K_max {instance.k_max[k]}")
    w, _ = throughput(instance, X)
    for m, ks in ((1, instance.K1), (2, instance.K2)):
        on = X[:, ks].sum(axis=1) > 0
        if on.sum() > instance.n_max[m - 1]:
            problems.append(f"C2: RAT-{m} serves {int(on.sum())} > N_max {instance.n_max[m - 1]}")
        load = float(w[on].sum())
        if load > instance.w_max[m - 1] * (1 + tol):
            problems.append(f"C1: RAT-{m} throughput {load:.6g} > w_max {instance.w_max[m - 1]:.6g}")
    return problems


def assignment_from_relaxed(instance, x):
    """Binary assignment from a relaxed ``x``: each user takes its largest entry."""
    X = as_matrix(instance, x)
    out = np.zeros_like(X)
    out[np.arange(instance.I), np.argmax(X, axis=1)] = 1.0
    return out


def greedy_assignment(instance):
    """Feasible assignment by greedy best-rate placement, or None."""
    I, K = instance.I, instance.K
    order = np.argsort(-instance.rates.max(axis=1), kind="stable")
    X = np.zeros((I, K))
    for i in order:
        for k in np.argsort(-instance.rates[i], kind="stable"):
            X[i, k] = 1
            partial = X[X.sum(axis=1) > 0]
            if _caps_ok(instance, X):
                break
            X[i, k] = 0
        else:
            return None
    return X if not validate_assignment(instance, X) else None


def _caps_ok(instance, X):
    cols = X.sum(axis=0)
    if np.any(cols > instance.k_max):
        return False
    for m, ks in ((1, instance.K1), (2, instance.K2)):
        if X[:, ks].sum() > instance.n_max[m - 1]:
            return False
    return True


def round_robin_assignment(instance):
    """Cycle users over SBSs, skipping SBSs or RATs whose caps are full.

    Used as the feasible starting point of the DC scheme.  Raises
    InfeasibleError when the result violates a cap.
    """
    I, K = instance.I, instance.K
    X = np.zeros((I, K))
    k = 0
    for i in range(I):
        for _ in range(K):
            X[i, k] = 1
            k = (k + 1) % K
            if _caps_ok(instance, X):
                break
            X[i, (k - 1) % K] = 0
        else:
            raise InfeasibleError(f"round-robin could not place user {i}")
    problems = validate_assignment(instance, X)
    if problems:
        X = greedy_assignment(instance)
        if X is None:
            raise InfeasibleError("; ".join(problems))
    return X


# ---------------------------------------------------------------------------
# relaxed problems


def _index(instance):
    I, K = instance.I, instance.K
    n = I * K
    return n, n + I, n + I + 1  # offsets of u, v1, v2 in z = (x, u, v)


def _rows(instance):
    """Linear constraints C1-C4 on x, as (A_eq, b_eq, A_ub, b_ub) over x only."""
    I, K = instance.I, instance.K
    n = I * K
    r = instance.working_rates()
    wmax = instance.w_max / instance.rate_unit
    K1, K2 = instance.K1, instance.K2

    A_eq = np.zeros((I, n))
    for i in range(I):
        A_eq[i, i * K:(i + 1) * K] = 1.0
    b_eq = np.ones(I)

    ub_rows, ub_rhs = [], []
    for k in range(K):  # C4
        row = np.zeros((I, K))
        row[:, k] = 1.0
        ub_rows.append(row.ravel())
        ub_rhs.append(instance.k_max[k])
    for m, ks in ((1, K1), (2, K2)):  # C2
        row = np.zeros((I, K))
        row[:, ks] = 1.0
        ub_rows.append(row.ravel())
        ub_rhs.append(instance.n_max[m - 1])
    # C1 multiplied through by the (positive) RAT load:
    #   RAT-1: sum x - w_max1 * sum x / r <= 0
    #   RAT-2: sum x r - w_max2 * sum x <= 0
    row = np.zeros((I, K))
    row[:, K1] = 1.0 - wmax[0] / r[:, K1]
    ub_rows.append(row.ravel())
    ub_rhs.append(0.0)
    row = np.zeros((I, K))
    row[:, K2] = r[:, K2] - wmax[1]
    ub_rows.append(row.ravel())
    ub_rhs.append(0.0)
    return A_eq, b_eq, np.array(ub_rows), np.array(ub_rhs, dtype=float)


def _coupling(instance):
    """Affine rows tying (u, v1, v2) to x, over z = (x, u, v)."""
    I, K = instance.I, instance.K
    n, iv1, iv2 = _index(instance)
    dim = n + I + 2
    r = instance.working_rates()
    K1, K2 = instance.K1, instance.K2
    rows = np.zeros((I + 2, dim))
    for i in range(I):
        rows[i, n + i] = 1.0
        for k in K2:
            rows[i, i * K + k] = -r[i, k]
    row = np.zeros((I, K))
    row[:, K1] = 1.0 / r[:, K1]
    rows[I, :n] = -row.ravel()
    rows[I, iv1] = 1.0
    row = np.zeros((I, K))
    row[:, K2] = 1.0
    rows[I + 1, :n] = -row.ravel()
    rows[I + 1, iv2] = 1.0
    return rows, np.zeros(I + 2)


def _bounds(instance, floor):
    I, K = instance.I, instance.K
    r = instance.working_rates()
    K1, K2 = instance.K1, instance.K2
    lower = np.concatenate([np.zeros(I * K), np.zeros(I), [floor, floor]])
    upper = np.concatenate([
        np.ones(I * K),
        r[:, K2].max(axis=1),
        [max(float(np.sum((1.0 / r[:, K1]).max(axis=1))), floor), max(float(I), floor)],
    ])
    return lower, upper


def rat_regions(instance, floor=V_FLOOR):
    """Joint region (with the coupling equalities) and the x-only region."""
    I, K = instance.I, instance.K
    n = I * K
    pad = np.zeros((0, I + 2))
    A_eq, b_eq, A_ub, b_ub = _rows(instance)
    lift = lambda A: np.hstack([A, np.zeros((A.shape[0], I + 2))])
    C, c = _coupling(instance)
    lower, upper = _bounds(instance, floor)
    joint = FeasibleRegion(lower, upper, np.vstack([lift(A_eq), C]), np.concatenate([b_eq, c]),
                           lift(A_ub), b_ub)
    x_only = FeasibleRegion(lower, upper, lift(A_eq), b_eq, lift(A_ub), b_ub)
    return joint, x_only


def _split(instance, x, y):
    I = instance.I
    return as_matrix(instance, x), y[:I], y[I], y[I + 1]


def objective(instance, x, y):
    """Relaxed aggregate throughput ``f(x, u, v)`` in working units."""
    X, u, v1, v2 = _split(instance, x, y)
    a = instance.alpha
    s1 = X[:, instance.K1].sum(axis=1)
    s2 = X[:, instance.K2].sum(axis=1)
    val = float(a @ s1) / v1
    num = float(a @ (s2 * u))
    if num != 0.0:
        val += num / v2
    return val


def _objective_grads(instance, x, y):
    X, u, v1, v2 = _split(instance, x, y)
    a = instance.alpha
    K1, K2 = instance.K1, instance.K2
    s1 = X[:, K1].sum(axis=1)
    s2 = X[:, K2].sum(axis=1)
    gX = np.zeros_like(X)
    gX[:, K1] = (a / v1)[:, None]
    gX[:, K2] = (a * u / v2)[:, None]
    gu = a * s2 / v2
    gv1 = -float(a @ s1) / v1**2
    gv2 = -float(a @ (s2 * u)) / v2**2
    return gX.ravel(), np.concatenate([gu, [gv1, gv2]])


def lipschitz_constant(instance):
    """Lipschitz constant of the relaxed throughput in ``x`` (working units).

    ``sqrt(I) * alpha_max * |r1_max - r2_min / (I - N1_max)|``.

    Raises
    ------
    ValueError
        If ``I <= N1_max``; the default caps ``N_max = I - 1`` give a
        denominator of exactly 1.
    """
    I = instance.I
    denom = I - int(instance.n_max[0])
    if denom <= 0:
        raise ValueError(
            f"Lipschitz formula needs I > N1_max (got I={I}, N1_max={instance.n_max[0]}); "
            "use N_max = I - 1"
        )
    r = instance.working_rates()
    r1_max = float(r[:, instance.K1].max())
    r2_min = float(r[:, instance.K2].min())
    return math.sqrt(I) * float(instance.alpha.max()) * abs(r1_max - r2_min / denom)


def build_multiconvex(instance, floor=V_FLOOR):
    """Block multi-convex relaxation with blocks ``x``, ``u``, ``v``.

    The objective is the negated throughput (minimized).  The u- and v-steps
    see the coupling equalities and therefore recompute the auxiliaries from
    ``x``; the x-step sees C1-C4 only, with ``(u, v)`` held as data.
    """
    I, K = instance.I, instance.K
    joint, x_only = rat_regions(instance, floor)

    def fun(x, y):
        return -objective(instance, x, y)

    def grad_x(x, y):
        return -_objective_grads(instance, x, y)[0]

    def grad_y(x, y):
        return -_objective_grads(instance, x, y)[1]

    try:
        L = lipschitz_constant(instance)
    except ValueError:
        L = None
    return MixedProblem(
        n=I * K, m=I + 2, fun=fun, grad_x=grad_x, grad_y=grad_y, region=joint,
        lipschitz=L, blocks=(Block("u", range(I)), Block("v", (I, I + 1))),
        x_region=x_only, name="rat-multiconvex",
    )


def split_parts(instance, x, y):
    """Convex pieces ``(f_a, f_b)`` of the throughput, ``f = f_a - f_b``.

    ``f_a = 1/2 sum_i alpha_i [sum_{K1} (x_ik + 1/v1)^2 + sum_{K2} (x_ik + u_i)^2 / v2]``
    ``f_b = 1/2 sum_i alpha_i [sum_{K1} (x_ik^2 + 1/v1^2) + sum_{K2} (x_ik^2 + u_i^2) / v2]``
    """
    X, u, v1, v2 = _split(instance, x, y)
    a = instance.alpha
    X1, X2 = X[:, instance.K1], X[:, instance.K2]
    fa = 0.5 * float(a @ (((X1 + 1.0 / v1) ** 2).sum(axis=1)
                          + ((X2 + u[:, None]) ** 2).sum(axis=1) / v2))
    fb = 0.5 * float(a @ ((X1**2 + 1.0 / v1**2).sum(axis=1)
                          + (X2**2 + u[:, None] ** 2).sum(axis=1) / v2))
    return fa, fb


def _fa_parts(instance):
    K1, K2 = instance.K1, instance.K2

    def fun(x, y):
        return split_parts(instance, x, y)[0]

    def grads(x, y):
        X, u, v1, v2 = _split(instance, x, y)
        a = instance.alpha[:, None]
        gX = np.zeros_like(X)
        t1 = X[:, K1] + 1.0 / v1
        t2 = X[:, K2] + u[:, None]
        gX[:, K1] = a * t1
        gX[:, K2] = a * t2 / v2
        gu = (a * t2).sum(axis=1) / v2
        gv1 = -float((a * t1).sum()) / v1**2
        gv2 = -0.5 * float((a * t2**2).sum()) / v2**2
        return gX.ravel(), np.concatenate([gu, [gv1, gv2]])

    return ConvexPart(fun, lambda x, y: grads(x, y)[0], lambda x, y: grads(x, y)[1])


def _fb_parts(instance):
    K1, K2 = instance.K1, instance.K2

    def fun(x, y):
        return split_parts(instance, x, y)[1]

    def grads(x, y):
        X, u, v1, v2 = _split(instance, x, y)
        a = instance.alpha[:, None]
        gX = np.zeros_like(X)
        gX[:, K1] = a * X[:, K1]
        gX[:, K2] = a * X[:, K2] / v2
        gu = instance.alpha * len(K2) * u / v2
        gv1 = -float(instance.alpha.sum()) * len(K1) / v1**3
        gv2 = -0.5 * float((a * (X[:, K2] ** 2 + u[:, None] ** 2)).sum()) / v2**2
        return gX.ravel(), np.concatenate([gu, [gv1, gv2]])

    return ConvexPart(fun, lambda x, y: grads(x, y)[0], lambda x, y: grads(x, y)[1])


def build_dc(instance, floor=V_FLOOR):
    """Difference-of-convex form of the negated throughput.

    Minimizing ``-f = f_b - f_a`` keeps ``f_b`` as the convex part and
    linearizes ``f_a``.  The surrogate is jointly convex in ``(x, u, v)``, so
    the inner x-step moves all variables together and the coupling
    equalities stay in force throughout.
    """
    I, K = instance.I, instance.K
    joint, _ = rat_regions(instance, floor)
    v2_low = max(floor, float(I - instance.n_max[0]))
    L_convex = float(instance.alpha.max()) * math.sqrt(I) / min(1.0, v2_low)
    return DCProblem(
        n=I * K, m=I + 2, objective=DCFunction(_fb_parts(instance), _fa_parts(instance)),
        region=joint, lipschitz=L_convex, joint_step=True, name="rat-dc",
    )


def feasible_start(instance, floor=V_FLOOR):
    """Round-robin assignment with consistent auxiliaries, as ``(x, y)``."""
    X = round_robin_assignment(instance)
    u, v1, v2 = aux_variables(instance, X)
    y = np.concatenate([u, [max(v1, floor), max(v2, floor)]])
    return X.ravel(), y


# ---------------------------------------------------------------------------
# instance generation


def generate_instance(config: ChannelConfig, I, K=2, seed=0):
    """Random instance: users uniform in the cell, Rayleigh-faded path loss.

    ``r_ik = B log2(1 + P h_ik / (N0 B))`` with ``h_ik = psi_ik d_ik^-gamma``.
    Caps follow ``N_max = I - 1`` (at least 1), ``w_max[m]`` = largest rate on
    RAT ``m``, ``K_max = I`` and ``alpha = 1``.
    """
    if K < 2:
        raise ValueError("need K >= 2 so both RATs have an SBS")
    if I < 1:
        raise ValueError("need at least one user")
    rng = np.random.default_rng(seed)
    R = config.radius
    rad = R * np.sqrt(rng.uniform(size=I))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=I)
    users = np.column_stack([rad * np.cos(theta), rad * np.sin(theta)])
    if config.sbs_positions is not None:
        sbs = np.asarray(config.sbs_positions, dtype=float).reshape(K, 2)
    else:
        ang = np.pi * np.arange(K) * 2.0 / K + np.pi
        sbs = 0.5 * R * np.column_stack([np.cos(ang), np.sin(ang)])
        sbs[np.abs(sbs) < 1e-12] = 0.0
    d = np.linalg.norm(users[:, None, :] - sbs[None, :, :], axis=2)
    d = np.maximum(d, config.min_distance)
    psi = rng.rayleigh(scale=config.rayleigh_scale, size=(I, K))
    h = psi * d ** (-config.pathloss_exponent)
    p_w = 10.0 ** ((config.power_dbm - 30.0) / 10.0)
    n0_w = 10.0 ** ((config.noise_dbm_hz - 30.0) / 10.0)
    B = config.bandwidth
    rates = B * np.log2(1.0 + p_w * h / (n0_w * B))
    rat_of = np.array([1 + (k % 2) for k in range(K)])
    w_max = np.array([rates[:, rat_of == m].max() for m in (1, 2)])
    n_cap = max(I - 1, 1)
    return RatInstance(
        rates=rates, rat_of=rat_of, alpha=np.ones(I), n_max=np.array([n_cap, n_cap]),
        w_max=w_max, k_max=np.full(K, I), rate_unit=config.rate_unit, config=config,
        seed=seed, meta={"users": users.tolist(), "sbs": sbs.tolist()},
    )


# ---------------------------------------------------------------------------
# exhaustive search


def _chunks(I, K, size=1 << 16):
    it = itertools.product(range(K), repeat=I)
    while True:
        block = list(itertools.islice(it, size))
        if not block:
            return
        yield np.array(block, dtype=np.int64).reshape(len(block), I)


def exhaustive_oracle(instance, limit=ORACLE_LIMIT):
    """Best feasible assignment by enumerating every user-to-SBS map.

    Candidates are visited in lexicographic order of the SBS index tuple;
    among values within 1e-12 (relative) of the best, the first is kept.

    Returns
    -------
    (X, f_star) : (ndarray or None, float)
        ``X`` is ``I x K`` binary; ``f_star`` is in bits/s.  ``(None, -inf)``
        if nothing is feasible.

    Raises
    ------
    ValueError
        If ``K**I`` exceeds ``limit``.
    """
    I, K = instance.I, instance.K
    if K ** I > limit:
        raise ValueError(
            f"{K}^{I} assignments exceed the enumeration limit {limit:g}; "
            "use sampling-based bounds instead"
        )
    r = instance.rates
    rat = instance.rat_of
    alpha = instance.alpha
    users = np.arange(I)
    best_val, best = -np.inf, None
    for C in _chunks(I, K):
        rsel = r[users, C]
        on1 = rat[C] == 1
        n1 = on1.sum(axis=1)
        n2 = I - n1
        v1 = np.where(on1, 1.0 / rsel, 0.0).sum(axis=1)
        sum_r2 = np.where(on1, 0.0, rsel).sum(axis=1)
        a1 = np.where(on1, alpha, 0.0).sum(axis=1)
        a2r = np.where(on1, 0.0, alpha * rsel).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(n1 > 0, a1 / v1, 0.0) + np.where(n2 > 0, a2r / n2, 0.0)
            load1 = np.where(n1 > 0, n1 / v1, 0.0)
            load2 = np.where(n2 > 0, sum_r2 / n2, 0.0)
        counts = np.stack([(C == k).sum(axis=1) for k in range(K)], axis=1)
        ok = np.all(counts <= instance.k_max, axis=1)
        ok &= (n1 <= instance.n_max[0]) & (n2 <= instance.n_max[1])
        ok &= load1 <= instance.w_max[0] * (1 + 1e-9)
        ok &= load2 <= instance.w_max[1] * (1 + 1e-9)
        if not ok.any():
            continue
        val = np.where(ok, val, -np.inf)
        top = val.max()
        if top > best_val * (1 + 1e-12) if best_val > 0 else top > best_val:
            j = int(np.flatnonzero(val >= top * (1 - 1e-12))[0])
            best_val = float(val[j])
            best = C[j].copy()
    if best is None:
        return None, -np.inf
    X = np.zeros((I, K))
    X[users, best] = 1.0
    return X, best_val


class RelativeError(NamedTuple):
    chi: float        # 1 - f_star / f_alg
    chi_prime: float  # 1 - f_alg / f_star


def relative_error(f_star, f_alg):
    """Both relative-error conventions for a maximization problem.

    ``chi = 1 - f_star / f_alg`` is nonpositive when ``f_alg <= f_star``;
    ``chi_prime = 1 - f_alg / f_star`` is the usual nonnegative gap.
    """
    if f_alg == 0:
        raise ValueError("f_alg is zero; the relative error is undefined")
    if f_star == 0:
        raise ValueError("f_star is zero; the relative error is undefined")
    return RelativeError(1.0 - f_star / f_alg, 1.0 - f_alg / f_star)


# ---------------------------------------------------------------------------
# serialization


def _encode_floats(a):
    return [float(v).hex() for v in np.asarray(a, dtype=float).ravel()]


def to_dict(instance):
    return {
        "format": FORMAT_VERSION,
        "I": instance.I,
        "K": instance.K,
        "rates_hex": [_encode_floats(row) for row in instance.rates],
        "rates": [[repr(float(v)) for v in row] for row in instance.rates],
        "rat_of": instance.rat_of.tolist(),
        "alpha_hex": _encode_floats(instance.alpha),
        "n_max": instance.n_max.tolist(),
        "w_max_hex": _encode_floats(instance.w_max),
        "k_max": instance.k_max.tolist(),
        "rate_unit": instance.rate_unit,
        "seed": instance.seed,
        "config": asdict(instance.config) if instance.config is not None else None,
        "meta": instance.meta,
    }


def _field(data, key, parse):
    if key not in data:
        raise InstanceFormatError(f"missing field '{key}'")
    try:
        return parse(data[key])
    except (TypeError, ValueError) as exc:
        raise InstanceFormatError(f"field '{key}': {exc}") from exc


def _hex_list(vals):
    return [float.fromhex(v) if isinstance(v, str) else float(v) for v in vals]


def from_dict(data):
    if not isinstance(data, dict):
        raise InstanceFormatError("top level must be an object")
    rates = _field(data, "rates_hex", lambda v: np.array([_hex_list(row) for row in v]))
    I = _field(data, "I", int)
    K = _field(data, "K", int)
    if rates.shape != (I, K):
        raise InstanceFormatError(f"field 'rates_hex': shape {rates.shape} != ({I}, {K})")
    config = data.get("config")
    try:
        config = ChannelConfig(**config) if config else None
    except (TypeError, ValueError) as exc:
        raise InstanceFormatError(f"field 'config': {exc}") from exc
    kwargs = dict(
        rates=rates,
        rat_of=_field(data, "rat_of", lambda v: np.array(v, dtype=int)),
        alpha=_field(data, "alpha_hex", lambda v: np.array(_hex_list(v))),
        n_max=_field(data, "n_max", lambda v: np.array(v, dtype=int)),
        w_max=_field(data, "w_max_hex", lambda v: np.array(_hex_list(v))),
        k_max=_field(data, "k_max", lambda v: np.array(v, dtype=int)),
        rate_unit=_field(data, "rate_unit", float),
        config=config,
        seed=data.get("seed"),
        meta=data.get("meta") or {},
    )
    try:
        return RatInstance(**kwargs)
    except InfeasibleError:
        raise
    except ValueError as exc:
        raise InstanceFormatError(str(exc)) from exc


def save_instance(instance, path):
    with open(path, "w") as fh:
        json.dump(to_dict(instance), fh, indent=1)
        fh.write("\n")


def load_instance(path):
    """Read an instance file.

    Raises
    ------
    InstanceFormatError
        With the line number for JSON syntax errors, or the field name for
        missing or malformed fields.
    InfeasibleError
        If the caps admit no assignment.
    """
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return from_dict(data)
