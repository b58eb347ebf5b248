"""Batch experiments on random RAT instances.

Every experiment maps a configuration to named tables (lists of rows) plus a
manifest.  Seeds are processed independently, optionally in worker
processes, and rows are merged back in seed order so output files depend
only on the configuration.
"""

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from regmip import __version__
from regmip import rat
from regmip.alternating import PenaltySchedule, iteration_bound, solve_multiblock
from regmip.dc import dc_solve
from regmip.exceptions import SolverError
from regmip.penalty import distance

KINDS = ("cdf", "lambda-sweep", "convergence", "solve-one", "oracle", "gen")
ALGORITHMS = ("alg1", "alg2")
CHI_THRESHOLD = 0.15


@dataclass
class SolverParams:
    lambda0: float = 1.0
    rho: float = 2.0
    epsilon: float = 1e-3
    stop_tol: float = 1e-6
    max_outer: int = 200
    sub_tol: float = 1e-8
    sub_max_iter: int = 10_000
    max_outer_dc: int = 50

    def __post_init__(self):
        for name in ("lambda0", "epsilon", "stop_tol", "sub_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"solver.{name} must be positive")
        if not self.rho > 1:
            raise ValueError("solver.rho must exceed 1")
        for name in ("max_outer", "sub_max_iter", "max_outer_dc"):
            if getattr(self, name) < 1:
                raise ValueError(f"solver.{name} must be at least 1")


@dataclass
class ExperimentConfig:
    experiment: str = "cdf"
    I: list = field(default_factory=lambda: [5])
    K: int = 2
    seeds: int = 100
    base_seed: int = 0
    algorithm: str = "alg1"
    channel: rat.ChannelConfig = field(default_factory=rat.ChannelConfig)
    solver: SolverParams = field(default_factory=SolverParams)
    lambdas: Optional[list] = None     # explicit grid; else log-spaced up to 10 L
    lambda_points: int = 25
    lambda_min: float = 1e-2
    lambda_max_factor: float = 10.0
    settings: list = field(default_factory=lambda: [[r, e] for r in (1.5, 2.0, 4.0)
                                                    for e in (1e-1, 1e-2)])
    instance: Optional[str] = None
    out: str = "out"
    threads: Optional[int] = None

    def __post_init__(self):
        if self.experiment not in KINDS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {KINDS}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if isinstance(self.I, int):
            self.I = [self.I]
        if not self.I or any(int(i) < 1 for i in self.I):
            raise ValueError("I must list positive user counts")
        self.I = [int(i) for i in self.I]
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.seeds < 1:
            raise ValueError("seeds must be at least 1")
        if self.lambdas is not None:
            grid = np.asarray(self.lambdas, dtype=float)
            if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
                raise ValueError("lambdas must be positive and ascending")
        if self.lambda_points < 1 or not self.lambda_min > 0 or not self.lambda_max_factor > 0:
            raise ValueError("lambda grid parameters must be positive")
        for pair in self.settings:
            if len(pair) != 2 or not pair[0] > 1 or not pair[1] > 0:
                raise ValueError(f"bad (rho, epsilon) setting {pair}")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be at least 1")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(data.get("channel"), dict):
            data["channel"] = rat.ChannelConfig(**data["channel"])
        if isinstance(data.get("solver"), dict):
            data["solver"] = SolverParams(**data["solver"])
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """Hash of the settings that determine the output rows."""
        d = self.to_dict()
        for key in ("out", "threads"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def seed_list(self):
        return list(range(self.base_seed, self.base_seed + self.seeds))


@dataclass
class ExperimentResult:
    tables: dict                 # file stem -> (header, rows)
    manifest: dict
    report: str = ""
    failed: bool = False


# ---------------------------------------------------------------------------
# solving


def schedule_of(params: SolverParams, lambda0=None, rho=None):
    return PenaltySchedule(lambda0=params.lambda0 if lambda0 is None else lambda0,
                           rho=params.rho if rho is None else rho)


def solve_instance(instance, algorithm, params: SolverParams, schedule=None, epsilon=None):
    """Run one algorithm on an instance.

    Returns ``(assignment, aggregate_bits_per_s, trace)``; the assignment is
    the row-wise argmax of the final relaxed ``x``.
    """
    schedule = schedule or schedule_of(params)
    eps = params.epsilon if epsilon is None else epsilon
    common = dict(epsilon=eps, stop_tol=params.stop_tol, sub_tol=params.sub_tol,
                  sub_max_iter=params.sub_max_iter)
    if algorithm == "alg1":
        trace = solve_multiblock(rat.build_multiconvex(instance), schedule,
                                 max_outer=params.max_outer, **common)
    elif algorithm == "alg2":
        x0, y0 = rat.feasible_start(instance)
        trace = dc_solve(rat.build_dc(instance), x0, y0, schedule,
                         max_outer_dc=params.max_outer_dc, max_outer=params.max_outer, **common)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    X = rat.assignment_from_relaxed(instance, trace.x)
    _, agg = rat.throughput(instance, X)
    return X, agg, trace


def _instance(cfg, I, seed):
    return rat.generate_instance(cfg.channel, I, cfg.K, seed)


def _map(fn, tasks, threads):
    if threads == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def fmt(v):
    """Fixed CSV formatting: 12 significant digits for floats."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    if v is None:
        return ""
    return str(v)


def _manifest(cfg, phases, statuses, **extra):
    return {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "version": __version__,
        "wall_clock_s": phases,
        "seed_status": statuses,
        **extra,
    }


# ---------------------------------------------------------------------------
# cdf


def _cdf_task(args):
    cfg, I, seed = args
    row = {"seed": seed, "I": I, "algorithm": cfg.algorithm, "f_alg": None, "f_star": None,
           "chi": None, "chi_prime": None, "feasible": None, "status": "ok"}
    try:
        inst = _instance(cfg, I, seed)
        _, f_star = rat.exhaustive_oracle(inst)
        X, f_alg, _ = solve_instance(inst, cfg.algorithm, cfg.solver)
        err = rat.relative_error(f_star, f_alg)
        row.update(f_alg=f_alg, f_star=f_star, chi=err.chi, chi_prime=err.chi_prime,
                   feasible=not rat.validate_assignment(inst, X))
    except (ValueError, SolverError) as exc:
        row["status"] = f"{type(exc).__name__}: {exc}"
    return row


def run_cdf(cfg: ExperimentConfig) -> ExperimentResult:
    t0 = time.perf_counter()
    tasks = [(cfg, I, s) for I in cfg.I for s in cfg.seed_list()]
    rows = _map(_cdf_task, tasks, cfg.threads)
    t1 = time.perf_counter()
    cols = ["seed", "I", "algorithm", "f_alg", "f_star", "chi", "chi_prime", "feasible", "status"]
    table = [[r[c] for c in cols] for r in rows]

    quant, summary = [], []
    for I in cfg.I:
        chis = np.array([r["chi_prime"] for r in rows if r["I"] == I and r["chi_prime"] is not None])
        n_fail = sum(1 for r in rows if r["I"] == I and r["chi_prime"] is None)
        if chis.size:
            levels = np.arange(1, 101) / 100.0
            q = np.quantile(chis, levels, method="inverted_cdf")
            quant += [[I, lv, qv] for lv, qv in zip(levels, q)]
            p = float(np.mean(chis <= CHI_THRESHOLD))
        else:
            p = float("nan")
        summary.append([I, int(chis.size), n_fail, CHI_THRESHOLD, p])
    statuses = {f"I={r['I']},seed={r['seed']}": r["status"] for r in rows}
    return ExperimentResult(
        tables={
            "cdf": (cols, table),
            "cdf_quantiles": (["I", "level", "chi_prime"], quant),
            "cdf_summary": (["I", "n", "failures", "threshold", "P_chi_prime_le_threshold"], summary),
        },
        manifest=_manifest(cfg, {"solve": t1 - t0}, statuses),
        report="\n".join(f"I={s[0]}: P(chi' <= {CHI_THRESHOLD}) = {s[4]:.3f} over {s[1]} seeds"
                         for s in summary),
    )


# ---------------------------------------------------------------------------
# lambda sweep


def lambda_grid(cfg, L):
    if cfg.lambdas is not None:
        return np.asarray(cfg.lambdas, dtype=float)
    hi = cfg.lambda_max_factor * L
    if hi <= cfg.lambda_min:
        hi = cfg.lambda_min * 10.0
    return np.geomspace(cfg.lambda_min, hi, cfg.lambda_points)


def _sweep_task(args):
    cfg, I, seed = args
    inst = _instance(cfg, I, seed)
    L = rat.lipschitz_constant(inst)
    problem = rat.build_multiconvex(inst)
    p = cfg.solver
    rows = []
    for lam in lambda_grid(cfg, L):
        status = "ok"
        try:
            tr = solve_multiblock(problem, PenaltySchedule.fixed(float(lam)), epsilon=p.epsilon,
                                  stop_tol=p.stop_tol, max_outer=p.max_outer, sub_tol=p.sub_tol,
                                  sub_max_iter=p.sub_max_iter)
            d = distance(tr.x)
            # the relaxed objective at the final point, in bits/s
            f_alg = -problem.fun(tr.x, tr.y) * inst.rate_unit
            status = tr.status
        except SolverError as exc:
            d, f_alg, status = float("nan"), float("nan"), type(exc).__name__
        rows.append([seed, I, float(lam), L, bool(lam > L), f_alg, d, bool(d <= 1e-6), status])
    return L, rows


def run_lambda_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    t0 = time.perf_counter()
    tasks = [(cfg, I, s) for I in cfg.I for s in cfg.seed_list()]
    out = _map(_sweep_task, tasks, cfg.threads)
    rows = [r for _, rs in out for r in rs]
    lips = {f"I={t[1]},seed={t[2]}": L for t, (L, _) in zip(tasks, out)}
    statuses = {f"I={t[1]},seed={t[2]}": "ok" for t in tasks}
    cols = ["seed", "I", "lambda", "lipschitz", "above_L", "f_alg", "d", "binary", "status"]
    return ExperimentResult(
        tables={"lambda_sweep": (cols, rows)},
        manifest=_manifest(cfg, {"solve": time.perf_counter() - t0}, statuses, lipschitz=lips),
    )


# ---------------------------------------------------------------------------
# convergence


def _conv_task(args):
    cfg, I, seed = args
    inst = _instance(cfg, I, seed)
    L = rat.lipschitz_constant(inst)
    problem = rat.build_multiconvex(inst)
    n = problem.n
    p = cfg.solver
    iters, summary = [], []
    for rho, eps in cfg.settings:
        bound = iteration_bound(L, n, eps, p.lambda0, rho)
        try:
            tr = solve_multiblock(problem, PenaltySchedule(p.lambda0, rho), epsilon=eps,
                                  stop_tol=p.stop_tol, max_outer=p.max_outer, sub_tol=p.sub_tol,
                                  sub_max_iter=p.sub_max_iter)
        except SolverError as exc:
            summary.append([seed, I, rho, eps, p.lambda0, L, bound, None, None,
                            type(exc).__name__])
            continue
        for r in tr.records:
            iters.append([seed, I, rho, eps, p.lambda0, r.t, r.lam, r.L_a, r.d, bound])
        first = tr.first_binary(eps)
        summary.append([seed, I, rho, eps, p.lambda0, L, bound, first,
                        first is not None and first <= bound, tr.status])
    return iters, summary


def run_convergence(cfg: ExperimentConfig) -> ExperimentResult:
    t0 = time.perf_counter()
    tasks = [(cfg, I, s) for I in cfg.I for s in cfg.seed_list()]
    out = _map(_conv_task, tasks, cfg.threads)
    iters = [r for it, _ in out for r in it]
    summary = [r for _, sm in out for r in sm]
    statuses = {f"I={t[1]},seed={t[2]}": "ok" for t in tasks}
    return ExperimentResult(
        tables={
            "convergence": (["seed", "I", "rho", "epsilon", "lambda0", "t", "lambda", "L_value",
                             "d", "bound"], iters),
            "convergence_summary": (["seed", "I", "rho", "epsilon", "lambda0", "lipschitz",
                                     "bound", "first_binary", "within_bound", "status"], summary),
        },
        manifest=_manifest(cfg, {"solve": time.perf_counter() - t0}, statuses),
    )


# ---------------------------------------------------------------------------
# single instances


def run_solve_one(cfg: ExperimentConfig, instance) -> ExperimentResult:
    t0 = time.perf_counter()
    X, agg, trace = solve_instance(instance, cfg.algorithm, cfg.solver)
    w, _ = rat.throughput(instance, X)
    problems = rat.validate_assignment(instance, X)
    sol = [[i, int(np.argmax(X[i])), int(instance.rat_of[np.argmax(X[i])]), w[i]]
           for i in range(instance.I)]
    if cfg.algorithm == "alg1":
        tr_cols = ["t", "lambda", "L_value", "f", "d"]
        tr_rows = [[r.t, r.lam, r.L_a, r.f, r.d] for r in trace.records]
    else:
        tr_cols = ["l", "f", "L_value", "d", "inner_iterations", "accepted"]
        tr_rows = [[r.l, r.f, r.L_a, r.d, r.inner_iterations, r.accepted] for r in trace.records]
    lines = [f"algorithm: {cfg.algorithm}", f"status: {trace.status}",
             f"aggregate throughput: {agg:.6g} bit/s"]
    lines += [f"user {i}: SBS {k} (RAT-{m}), w = {wi:.6g} bit/s" for i, k, m, wi in sol]
    lines.append("validation: " + ("C1-C5 satisfied" if not problems else "; ".join(problems)))
    return ExperimentResult(
        tables={"solution": (["user", "sbs", "rat", "throughput"], sol),
                "trace": (tr_cols, tr_rows)},
        manifest=_manifest(cfg, {"solve": time.perf_counter() - t0}, {"instance": trace.status},
                           aggregate=agg, feasible=not problems),
        report="\n".join(lines),
        failed=bool(problems),
    )


def run_oracle(cfg: ExperimentConfig, instance=None) -> ExperimentResult:
    t0 = time.perf_counter()
    rows, statuses = [], {}
    jobs = [(None, instance)] if instance is not None else [
        (s, _instance(cfg, I, s)) for I in cfg.I for s in cfg.seed_list()]
    for seed, inst in jobs:
        key = f"I={inst.I},seed={seed}"
        try:
            X, f_star = rat.exhaustive_oracle(inst)
        except ValueError as exc:
            statuses[key] = str(exc)
            rows.append([seed, inst.I, None, None, "too_large"])
            continue
        statuses[key] = "ok"
        code = "" if X is None else "".join(str(int(k)) for k in np.argmax(X, axis=1))
        rows.append([seed, inst.I, f_star, code, "ok" if X is not None else "infeasible"])
    return ExperimentResult(
        tables={"oracle": (["seed", "I", "f_star", "assignment", "status"], rows)},
        manifest=_manifest(cfg, {"oracle": time.perf_counter() - t0}, statuses),
    )


RUNNERS = {"cdf": run_cdf, "lambda-sweep": run_lambda_sweep, "convergence": run_convergence}


def write_result(result: ExperimentResult, out_dir):
    """Write one CSV per table plus ``manifest.json``; return the CSV paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for stem, (header, rows) in result.tables.items():
        path = os.path.join(out_dir, f"{stem}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows([fmt(v) for v in row] for row in rows)
        paths.append(path)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(result.manifest, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return paths
