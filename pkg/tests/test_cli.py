import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from regmip import cli, rat
from regmip import experiments as ex
from regmip.exceptions import SolverError


def regmip(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "regmip", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def write_config(path, **data):
    path.write_text(json.dumps(data))
    return path


# --- config ---------------------------------------------------------------------

def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        ex.ExperimentConfig.from_dict({"experiment": "cdf", "sedes": 3})


@pytest.mark.parametrize("bad", [{"seeds": 0}, {"I": [0]}, {"K": 1}, {"lambdas": [2.0, 1.0]},
                                 {"settings": [[1.0, 0.1]]}, {"algorithm": "alg3"}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ex.ExperimentConfig(**bad)


def test_digest_ignores_output_location():
    a = ex.ExperimentConfig(out="a", threads=1)
    b = ex.ExperimentConfig(out="b", threads=8)
    assert a.digest() == b.digest()
    assert a.digest() != ex.ExperimentConfig(seeds=7).digest()


def test_fixed_formatting():
    assert ex.fmt(1 / 3) == "0.333333333333"
    assert ex.fmt(True) == "1" and ex.fmt(None) == "" and ex.fmt(7) == "7"


# --- gen / solve-one / oracle --------------------------------------------------------

def test_generate_then_solve_validates(tmp_path):
    res = regmip("gen", "--I", 5, "--seeds", 1, "--seed", 3, "--out", tmp_path)
    assert res.returncode == 0, res.stderr
    inst_path = tmp_path / "instance_I5_K2_seed3.json"
    assert inst_path.exists()
    res = regmip("solve-one", inst_path, "--out", tmp_path / "sol")
    assert res.returncode == 0, res.stderr
    assert "C1-C5 satisfied" in res.stdout
    sol = read_csv(tmp_path / "sol" / "solution.csv")
    assert len(sol) == 5
    manifest = json.loads((tmp_path / "sol" / "manifest.json").read_text())
    assert manifest["feasible"] is True and len(manifest["config_hash"]) == 64


def test_both_algorithms_on_one_instance(tmp_path):
    inst = rat.generate_instance(rat.ChannelConfig(), 6, seed=2)
    path = tmp_path / "inst.json"
    rat.save_instance(inst, path)
    aggregates = {}
    for alg in ex.ALGORITHMS:
        assert cli.main(["solve-one", str(path), "--algorithm", alg, "--threads", "1",
                         "--out", str(tmp_path / alg)]) == 0
        m = json.loads((tmp_path / alg / "manifest.json").read_text())
        assert m["feasible"]
        aggregates[alg] = m["aggregate"]
    _, f_star = rat.exhaustive_oracle(inst)
    assert all(v <= f_star * (1 + 1e-12) for v in aggregates.values())


def test_oracle_command(tmp_path):
    assert cli.main(["oracle", "--I", "4", "--seeds", "3", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "oracle.csv")
    assert [r["seed"] for r in rows] == ["0", "1", "2"]
    for r in rows:
        inst = rat.generate_instance(rat.ChannelConfig(), 4, seed=int(r["seed"]))
        assert float(r["f_star"]) == pytest.approx(rat.exhaustive_oracle(inst)[1], rel=1e-11)


# --- exit codes --------------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main(["cdf", "--seeds", "0", "--out", str(tmp_path)]) == 1
    assert cli.main(["solve-one", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"rates\": [1,\n")
    assert cli.main(["solve-one", str(bad), "--out", str(tmp_path)]) == 1
    assert "line" in capsys.readouterr().err
    assert regmip("bogus").returncode == 1


def test_zero_cap_instance_exits_3(tmp_path, capsys):
    data = rat.to_dict(rat.generate_instance(rat.ChannelConfig(), 4, seed=0))
    data["k_max"] = [0] * len(data["k_max"])
    path = tmp_path / "inst.json"
    path.write_text(json.dumps(data))
    assert cli.main(["solve-one", str(path), "--out", str(tmp_path)]) == 3
    assert "C4" in capsys.readouterr().err


def test_solver_failure_exits_2(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise SolverError("subsolver stalled")

    monkeypatch.setattr(ex, "solve_instance", boom)
    inst = rat.generate_instance(rat.ChannelConfig(), 3, seed=0)
    path = tmp_path / "inst.json"
    rat.save_instance(inst, path)
    assert cli.main(["solve-one", str(path), "--out", str(tmp_path)]) == 2


# --- experiments ------------------------------------------------------------------

def test_single_seed_cdf(tmp_path):
    assert cli.main(["cdf", "--I", "4", "--seeds", "1", "--threads", "1",
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "cdf.csv")
    assert len(rows) == 1
    q = read_csv(tmp_path / "cdf_quantiles.csv")
    assert len(q) == 100
    # a single sample gives a one-step CDF: every quantile is that sample
    assert {r["chi_prime"] for r in q} == {rows[0]["chi_prime"]}


def test_cdf_runs_in_parallel_identically(tmp_path):
    base = ["cdf", "--I", "4", "--seeds", "4"]
    assert cli.main(base + ["--threads", "1", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--threads", "3", "--out", str(tmp_path / "b")]) == 0
    for name in ("cdf.csv", "cdf_quantiles.csv", "cdf_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_lambda_sweep_single_point_above_threshold(tmp_path):
    inst = rat.generate_instance(rat.ChannelConfig(), 6, seed=0)
    L = rat.lipschitz_constant(inst)
    cfg = write_config(tmp_path / "c.json", lambdas=[2 * L])
    assert cli.main(["lambda-sweep", "--config", str(cfg), "--I", "6", "--seeds", "1",
                     "--threads", "1", "--out", str(tmp_path)]) == 0
    (row,) = read_csv(tmp_path / "lambda_sweep.csv")
    assert row["above_L"] == "1" and row["binary"] == "1"
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["lipschitz"]["I=6,seed=0"] == pytest.approx(L)


def test_lambda_sweep_tiny_grid_is_well_formed(tmp_path):
    cfg = write_config(tmp_path / "c.json", lambdas=[1e-6, 2e-6], solver={"max_outer": 20})
    assert cli.main(["lambda-sweep", "--config", str(cfg), "--I", "5", "--seeds", "2",
                     "--threads", "1", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "lambda_sweep.csv")
    assert len(rows) == 4
    for r in rows:
        assert r["above_L"] == "0"
        assert math.isfinite(float(r["f_alg"])) and float(r["d"]) >= 0


def test_default_lambda_grid_straddles_threshold():
    cfg = ex.ExperimentConfig(experiment="lambda-sweep")
    grid = ex.lambda_grid(cfg, 5.0)
    assert grid.size == 25 and grid[0] == pytest.approx(1e-2) and grid[-1] == pytest.approx(50.0)
    assert np.all(np.diff(grid) > 0)


def test_convergence_large_lambda0_has_zero_bound(tmp_path):
    inst = rat.generate_instance(rat.ChannelConfig(), 6, seed=0)
    L = rat.lipschitz_constant(inst)
    eps = 1e-2
    lam0 = L * math.sqrt(12) / eps * 1.01
    cfg = write_config(tmp_path / "c.json", settings=[[2.0, eps]], solver={"lambda0": lam0})
    assert cli.main(["convergence", "--config", str(cfg), "--I", "6", "--seeds", "1",
                     "--threads", "1", "--out", str(tmp_path)]) == 0
    (row,) = read_csv(tmp_path / "convergence_summary.csv")
    assert row["bound"] == "0" and row["first_binary"] == "0" and row["within_bound"] == "1"


def test_larger_rho_converges_no_slower(tmp_path):
    cfg = write_config(tmp_path / "c.json", settings=[[1.1, 1e-2], [4.0, 1e-2]])
    assert cli.main(["convergence", "--config", str(cfg), "--I", "10", "--seeds", "3",
                     "--threads", "1", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "convergence_summary.csv")
    for seed in ("0", "1", "2"):
        slow, fast = [int(r["first_binary"]) for r in rows if r["seed"] == seed]
        assert fast <= slow
    assert all(r["within_bound"] == "1" for r in rows)
