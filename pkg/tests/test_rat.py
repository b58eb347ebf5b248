import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regmip import rat
from regmip.exceptions import InfeasibleError
from regmip.experiments import SolverParams, solve_instance

CFG = rat.ChannelConfig()


def small(rates, rat_of=(1, 2), n_max=None, w_max=None, k_max=None, alpha=None):
    rates = np.asarray(rates, float)
    I, K = rates.shape
    return rat.RatInstance(
        rates=rates, rat_of=rat_of, alpha=np.ones(I) if alpha is None else alpha,
        n_max=[I, I] if n_max is None else n_max,
        w_max=[1e9, 1e9] if w_max is None else w_max,
        k_max=[I] * K if k_max is None else k_max,
    )


def onehot(choice, K):
    X = np.zeros((len(choice), K))
    X[np.arange(len(choice)), choice] = 1
    return X


# --- throughput ------------------------------------------------------------------

def test_two_users_on_rat1():
    inst = small([[2.0, 1.0], [4.0, 1.0]])
    w, agg = rat.throughput(inst, onehot([0, 0], 2))
    assert np.allclose(w, [4 / 3, 4 / 3])
    assert agg == pytest.approx(8 / 3)


def test_two_users_on_rat2():
    inst = small([[1.0, 3.0], [1.0, 5.0]])
    w, agg = rat.throughput(inst, onehot([1, 1], 2))
    assert np.allclose(w, [1.5, 2.5])
    assert agg == pytest.approx(4.0)


def brute_throughput(rates, rat_of, alpha, choice):
    on1 = [i for i, k in enumerate(choice) if rat_of[k] == 1]
    on2 = [i for i, k in enumerate(choice) if rat_of[k] == 2]
    w = [0.0] * len(choice)
    if on1:
        share = 1.0 / sum(1.0 / rates[i][choice[i]] for i in on1)
        for i in on1:
            w[i] = share
    for i in on2:
        w[i] = rates[i][choice[i]] / len(on2)
    return w, sum(a * wi for a, wi in zip(alpha, w))


@pytest.mark.parametrize("seed", range(5))
def test_mixed_assignment_matches_brute_force(seed):
    inst = rat.generate_instance(CFG, 3, K=3, seed=seed)
    rng = np.random.default_rng(seed)
    choice = rng.integers(0, 3, size=3)
    w, agg = rat.throughput(inst, onehot(choice, 3))
    bw, bagg = brute_throughput(inst.rates.tolist(), inst.rat_of.tolist(), inst.alpha, choice)
    assert np.allclose(w, bw, rtol=1e-13)
    assert agg == pytest.approx(bagg, rel=1e-13)


# --- relaxed problems ------------------------------------------------------------------

def random_point(inst, rng, v_min=0.1):
    X = rng.dirichlet(np.ones(inst.K), size=inst.I)
    r = inst.working_rates()
    u = rng.uniform(0, r[:, inst.K2].max(axis=1))
    v = rng.uniform(v_min, [max(1.0, 1 / r.min()), inst.I])
    return X.ravel(), np.concatenate([u, v])


def test_objective_affine_in_x_for_fixed_aux():
    inst = rat.generate_instance(CFG, 5, seed=1)
    p = rat.build_multiconvex(inst)
    rng = np.random.default_rng(0)
    for _ in range(50):
        x1, y = random_point(inst, rng)
        x2, _ = random_point(inst, rng)
        mid = p.fun(0.5 * (x1 + x2), y)
        assert mid == pytest.approx(0.5 * (p.fun(x1, y) + p.fun(x2, y)), abs=1e-10)


def test_objective_convex_in_v():
    inst = rat.generate_instance(CFG, 5, seed=2)
    f = lambda x, y: rat.objective(inst, x, y)
    rng = np.random.default_rng(1)
    for _ in range(50):
        x, y1 = random_point(inst, rng)
        _, y2 = random_point(inst, rng)
        y2[: inst.I] = y1[: inst.I]
        assert f(x, 0.5 * (y1 + y2)) <= 0.5 * (f(x, y1) + f(x, y2)) + 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_consistent_triple_matches_throughput(seed):
    inst = rat.generate_instance(CFG, 5, seed=seed)
    X = rat.round_robin_assignment(inst)
    u, v1, v2 = rat.aux_variables(inst, X)
    val = rat.objective(inst, X.ravel(), np.concatenate([u, [v1, v2]])) * inst.rate_unit
    assert val == pytest.approx(rat.throughput(inst, X)[1], rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_binary_points_satisfy_coupling(seed):
    inst = rat.generate_instance(CFG, 6, seed=seed)
    joint, _ = rat.rat_regions(inst)
    for choice in itertools.islice(itertools.product(range(2), repeat=6), 1, 63, 7):
        X = onehot(list(choice), 2)
        u, v1, v2 = rat.aux_variables(inst, X)
        z = np.concatenate([X.ravel(), u, [v1, v2]])
        rows = joint.A_eq[inst.I:] @ z
        assert np.max(np.abs(rows)) <= 1e-12 * max(1.0, np.abs(z).max())


def test_dc_identity_on_samples():
    inst = rat.generate_instance(CFG, 6, seed=4)
    rng = np.random.default_rng(3)
    for _ in range(200):
        x, y = random_point(inst, rng)
        fa, fb = rat.split_parts(inst, x, y)
        assert abs((fa - fb) - rat.objective(inst, x, y)) <= 1e-10


def test_dc_gradients_match_finite_differences():
    inst = rat.generate_instance(CFG, 3, seed=5)
    p = rat.build_dc(inst)
    rng = np.random.default_rng(4)
    x, y = random_point(inst, rng, v_min=0.5)
    for part in (p.objective.fa, p.objective.fb):
        gx, gy = part.grad_x(x, y), part.grad_y(x, y)
        h = 1e-6
        for j in range(x.size):
            e = np.zeros(x.size)
            e[j] = h
            fd = (part.fun(x + e, y) - part.fun(x - e, y)) / (2 * h)
            assert fd == pytest.approx(gx[j], rel=1e-5, abs=1e-6)
        for j in range(y.size):
            e = np.zeros(y.size)
            e[j] = h
            fd = (part.fun(x, y + e) - part.fun(x, y - e)) / (2 * h)
            assert fd == pytest.approx(gy[j], rel=1e-5, abs=1e-6)


def test_dc_parts_are_convex_on_segments():
    inst = rat.generate_instance(CFG, 4, seed=6)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        x1, y1 = random_point(inst, rng)
        x2, y2 = random_point(inst, rng)
        a1, b1 = rat.split_parts(inst, x1, y1)
        a2, b2 = rat.split_parts(inst, x2, y2)
        am, bm = rat.split_parts(inst, 0.5 * (x1 + x2), 0.5 * (y1 + y2))
        worst = max(worst, am - 0.5 * (a1 + a2), bm - 0.5 * (b1 + b2))
    assert worst <= 1e-8


# --- Lipschitz constant ---------------------------------------------------------------

def test_lipschitz_formula_example():
    inst = small([[5.0, 2.0], [3.0, 1.0]], n_max=[1, 1])
    assert rat.lipschitz_constant(inst) == pytest.approx(math.sqrt(2) * 4, rel=1e-12)


def test_lipschitz_default_caps_give_unit_denominator():
    inst = rat.generate_instance(CFG, 7, seed=0)
    r = inst.working_rates()
    expect = math.sqrt(7) * abs(r[:, inst.K1].max() - r[:, inst.K2].min())
    assert rat.lipschitz_constant(inst) == pytest.approx(expect, rel=1e-12)


def test_lipschitz_rejects_degenerate_caps():
    inst = small([[5.0, 2.0], [3.0, 1.0]], n_max=[2, 2])
    with pytest.raises(ValueError, match="N_max = I - 1"):
        rat.lipschitz_constant(inst)


@pytest.mark.xfail(strict=True, reason="the closed-form constant underestimates the sampled "
                   "gradient norm of the relaxed objective; the closed form is kept")
def test_lipschitz_bounds_sampled_gradients():
    inst = rat.generate_instance(CFG, 5, seed=0)
    p = rat.build_multiconvex(inst)
    L = rat.lipschitz_constant(inst)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        X = rng.dirichlet(np.ones(2), size=5)
        u, v1, v2 = rat.aux_variables(inst, X)
        worst = max(worst, np.linalg.norm(p.grad_x(X.ravel(), np.concatenate([u, [v1, v2]]))))
    assert worst <= L


# --- generation -------------------------------------------------------------------

def test_generation_is_deterministic():
    a = rat.generate_instance(CFG, 8, seed=11)
    b = rat.generate_instance(CFG, 8, seed=11)
    assert a.rates.tobytes() == b.rates.tobytes()
    c = rat.generate_instance(CFG, 8, seed=12)
    assert a.rates.tobytes() != c.rates.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_rates_positive_and_default_caps(seed):
    inst = rat.generate_instance(CFG, 6, seed=seed)
    assert np.all(inst.rates > 0)
    assert inst.n_max.tolist() == [5, 5]
    assert inst.k_max.tolist() == [6, 6]
    assert inst.w_max[0] == inst.rates[:, inst.K1].max()
    assert inst.w_max[1] == inst.rates[:, inst.K2].max()
    users = np.array(inst.meta["users"])
    assert np.all(np.hypot(users[:, 0], users[:, 1]) <= CFG.radius)
    assert inst.meta["sbs"] == [[-25.0, 0.0], [25.0, 0.0]]


def test_rayleigh_second_moment_is_one():
    psi = np.random.default_rng(0).rayleigh(scale=CFG.rayleigh_scale, size=100_000)
    assert np.mean(psi ** 2) == pytest.approx(1.0, rel=0.02)


def test_generation_rejects_single_sbs():
    with pytest.raises(ValueError):
        rat.generate_instance(CFG, 3, K=1)


# --- oracle ---------------------------------------------------------------------------

def test_oracle_single_user():
    inst = small([[3.0, 7.0]], n_max=[1, 1])
    X, f = rat.exhaustive_oracle(inst)
    assert X.tolist() == [[0, 1]]
    assert f == 7.0


def test_oracle_symmetric_tie_is_lexicographic():
    inst = small([[4.0, 4.0], [4.0, 4.0]], n_max=[1, 1])
    X, f = rat.exhaustive_oracle(inst)
    # (0, 1) and (1, 0) tie; (0, 1) comes first
    assert np.argmax(X, axis=1).tolist() == [0, 1]
    assert f == pytest.approx(8.0)


def test_oracle_too_large():
    inst = rat.generate_instance(CFG, 24, seed=0)
    with pytest.raises(ValueError, match="sampling"):
        rat.exhaustive_oracle(inst)


@pytest.mark.parametrize("algorithm", ["alg1", "alg2"])
def test_oracle_dominates_solvers(algorithm):
    for seed in range(50):
        inst = rat.generate_instance(CFG, 6, seed=seed)
        _, f_star = rat.exhaustive_oracle(inst)
        X, f_alg, _ = solve_instance(inst, algorithm, SolverParams())
        assert rat.validate_assignment(inst, X) == []
        assert f_alg <= f_star * (1 + 1e-12) + 1e-9


def test_alg1_small_instance_near_optimal():
    inst = rat.generate_instance(CFG, 4, seed=0)
    _, f_star = rat.exhaustive_oracle(inst)
    _, f_alg, _ = solve_instance(inst, "alg1", SolverParams())
    assert rat.relative_error(f_star, f_alg).chi_prime <= 0.15


def test_relative_error_conventions():
    assert rat.relative_error(5.0, 5.0) == (0.0, 0.0)
    err = rat.relative_error(10.0, 8.0)
    assert err.chi == pytest.approx(-0.25) and err.chi_prime == pytest.approx(0.2)
    with pytest.raises(ValueError):
        rat.relative_error(1.0, 0.0)


# --- validation and construction ---------------------------------------------------------

def test_zero_caps_name_the_constraint():
    with pytest.raises(InfeasibleError, match="C4"):
        small([[1.0, 2.0], [1.0, 2.0]], k_max=[0, 0])
    with pytest.raises(InfeasibleError, match="C2"):
        small([[1.0, 2.0], [1.0, 2.0]], n_max=[0, 0])


def test_construction_rejects_bad_data():
    with pytest.raises(ValueError):
        small([[1.0, -2.0]])
    with pytest.raises(ValueError):
        small([[1.0, 2.0]], rat_of=(1, 1))


def test_validator_reports_each_constraint():
    inst = small([[2.0, 1.0], [4.0, 1.0]], n_max=[1, 2], k_max=[1, 2], w_max=[1.0, 1e9])
    issues = rat.validate_assignment(inst, onehot([0, 0], 2))
    text = " ".join(issues)
    assert "C2" in text and "C4" in text and "C1" in text
    assert rat.validate_assignment(inst, [[0.5, 0.5], [1, 0]])[0].startswith("C5")
    assert rat.validate_assignment(inst, [[1, 1], [1, 0]])[0].startswith("C3")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_validator_acceptance_implies_constraints(seed, choice):
    inst = rat.generate_instance(CFG, 4, K=3, seed=seed)
    X = onehot(choice, 3)
    if rat.validate_assignment(inst, X):
        return
    w, _ = brute_throughput(inst.rates.tolist(), inst.rat_of.tolist(), inst.alpha, choice)
    for m in (1, 2):
        users = [i for i, k in enumerate(choice) if inst.rat_of[k] == m]
        assert len(users) <= inst.n_max[m - 1]
        assert sum(w[i] for i in users) <= inst.w_max[m - 1] * (1 + 1e-9)
    counts = np.bincount(choice, minlength=3)
    assert np.all(counts <= inst.k_max)


# --- serialization ------------------------------------------------------------------

def test_roundtrip_is_lossless(tmp_path):
    inst = rat.generate_instance(CFG, 7, K=3, seed=9)
    path = tmp_path / "inst.json"
    rat.save_instance(inst, path)
    back = rat.load_instance(path)
    assert back.rates.tobytes() == inst.rates.tobytes()
    assert back.w_max.tobytes() == inst.w_max.tobytes()
    assert back.config == inst.config and back.seed == 9
    assert back.rate_unit == inst.rate_unit


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "I": 2,\n oops\n}')
    with pytest.raises(rat.InstanceFormatError, match="line 3"):
        rat.load_instance(path)


def test_missing_field_is_named(tmp_path):
    data = rat.to_dict(rat.generate_instance(CFG, 3, seed=0))
    del data["k_max"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(rat.InstanceFormatError, match="k_max"):
        rat.load_instance(path)
