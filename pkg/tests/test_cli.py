import json

import numpy as np
import pytest

from conftest import random_params, single_param_params
from directlik.cli import main
from directlik.graph import Dag, save_candidates, save_dag
from directlik.model import load_params, save_params, write_manifest, write_samples


@pytest.fixture
def small(tmp_path):
    """Three-variable dataset written through the simulate subcommand."""
    par = random_params(np.random.default_rng(0), p=3)
    conf = {"params": par.to_dict(), "n": 200, "seed": 4}
    (tmp_path / "conf.json").write_text(json.dumps(conf))
    assert main(["simulate", str(tmp_path / "conf.json"), "--out", str(tmp_path / "d")]) == 0
    save_dag(par.dag, tmp_path / "dag.json")
    save_candidates([par.dag, Dag.empty(3)], tmp_path / "cands.json")
    return tmp_path, par


def test_simulate_setting_a(tmp_path):
    assert main(["simulate", "--preset", "setting-a", "--t", "64", "--seed", "7",
                 "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    ns = [e["n"] for e in man["environments"]] if isinstance(man, dict) else [e["n"] for e in man]
    assert ns == [300] + [320] * 6
    assert len(list(tmp_path.glob("env_*.csv"))) == 7


def test_simulate_table2_response_unperturbed(tmp_path):
    assert main(["simulate", "--preset", "table2-setting-1", "--seed", "1",
                 "--out", str(tmp_path)]) == 0
    par = load_params(tmp_path / "params.json")
    resp = par.p - 1
    assert all(e.w[resp] == par.w1[resp] for e in par.envs)


def test_simulate_single_env(tmp_path):
    par = random_params(np.random.default_rng(1), p=3, m=1)
    (tmp_path / "c.json").write_text(json.dumps({"params": par.to_dict(), "n": 10}))
    assert main(["simulate", str(tmp_path / "c.json"), "--seed", "0", "--out", str(tmp_path / "o")]) == 0
    assert len(list((tmp_path / "o").glob("*.csv"))) == 1


def test_simulate_errors(tmp_path, capsys):
    assert main(["simulate", "--preset", "setting-a", "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", str(tmp_path / "bad.json"), "--seed", "1", "--out", str(tmp_path)]) == 1
    (tmp_path / "empty.json").write_text("{}")
    assert main(["simulate", str(tmp_path / "empty.json"), "--seed", "1", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_simulate_deterministic(tmp_path):
    for d in ("a", "b"):
        main(["simulate", "--preset", "setting-b", "--t", "4", "--seed", "3", "--out", str(tmp_path / d)])
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_score(small, capsys):
    tmp, par = small
    out = tmp / "fit.json"
    code = main(["score", str(tmp / "d" / "manifest.json"), str(tmp / "dag.json"),
                 "--lambda", "0.1", "--out", str(out)])
    res = json.loads(out.read_text())
    assert code == (0 if res["converged"] else 2)
    assert res["score"] == pytest.approx(res["nll"] + 0.1 * res["moral_edges"])


def test_score_missing_file(small):
    tmp, _ = small
    assert main(["score", str(tmp / "nope.json"), str(tmp / "dag.json")]) == 1


def test_numeric_failure_exit_code(tmp_path):
    # a zero column makes the pooled covariance singular
    x = np.random.default_rng(0).standard_normal((50, 3))
    x[:, 2] = 0.0
    write_samples(tmp_path / "e.csv", x)
    write_manifest(tmp_path / "m.json", [{"csv": "e.csv", "n": 50}])
    assert main(["search", str(tmp_path / "m.json"), "--auto-candidates"]) == 2


def test_search_deterministic(small):
    tmp, par = small
    args = ["search", str(tmp / "d" / "manifest.json"), "--candidates", str(tmp / "cands.json")]
    assert main(args + ["--out", str(tmp / "r1.json")]) == 0
    assert main(args + ["--out", str(tmp / "r2.json")]) == 0
    assert (tmp / "r1.json").read_bytes() == (tmp / "r2.json").read_bytes()
    rep = json.loads((tmp / "r1.json").read_text())
    assert rep["config"]["opt_tolerance"] == 1e-3


def test_search_needs_candidates(small):
    tmp, _ = small
    assert main(["search", str(tmp / "d" / "manifest.json")]) == 1
    assert main(["search", str(tmp / "d" / "manifest.json"), "--candidates", str(tmp / "cands.json"),
                 "--auto-candidates"]) == 1


def test_search_auto_candidates(small):
    tmp, _ = small
    assert main(["search", str(tmp / "d" / "manifest.json"), "--auto-candidates",
                 "--restarts", "3", "--out", str(tmp / "r.json")]) == 0


def test_validate_zero_grid(small):
    tmp, _ = small
    assert main(["validate", str(tmp / "d" / "manifest.json"), "--candidates", str(tmp / "cands.json"),
                 "--lambda-grid", "0", "--out", str(tmp / "v.json")]) == 0
    rep = json.loads((tmp / "v.json").read_text())
    assert rep["selected_lambda"] == 0.0
    assert rep["full_data_model"] is not None and rep["train_model"] is not None


def test_validate_picks_grid_argmin(small):
    tmp, _ = small
    assert main(["validate", str(tmp / "d" / "manifest.json"), "--candidates", str(tmp / "cands.json"),
                 "--lambda-grid", "0,0.01,0.1", "--out", str(tmp / "v.json")]) == 0
    rep = json.loads((tmp / "v.json").read_text())
    best = min(r["validation_nll"] for r in rep["path"])
    chosen = [r for r in rep["path"] if r["lambda"] == rep["selected_lambda"]][0]
    assert chosen["validation_nll"] == best


def test_validate_bad_grid(small):
    tmp, _ = small
    assert main(["validate", str(tmp / "d" / "manifest.json"), "--candidates", str(tmp / "cands.json"),
                 "--lambda-grid", "a,b"]) == 1
    assert main(["validate", str(tmp / "d" / "manifest.json"), "--candidates", str(tmp / "cands.json"),
                 "--holdout-frac", "1.5"]) == 1


def test_check_and_kl(small, capsys):
    tmp, _ = small
    params = str(tmp / "d" / "params.json")
    assert main(["check", params, "--out", str(tmp / "a.json")]) == 0
    assert "kappa*" in capsys.readouterr().out
    assert "ok" in json.loads((tmp / "a.json").read_text())
    assert main(["check", params, "--variant", "bogus"]) == 1
    # per-coordinate shifts are outside the single-parameter class
    assert main(["kl", params, "--env", "1", "--out", str(tmp / "k.json")]) == 0
    assert json.loads((tmp / "k.json").read_text())["kl"] > 0
    save_params(single_param_params(zeta=2.0, psi=0.3), tmp / "sp.json")
    assert main(["kl", str(tmp / "sp.json"), "--env", "1", "--out", str(tmp / "k2.json")]) == 0
    got = json.loads((tmp / "k2.json").read_text())
    assert got["kl"] <= 1e-8 and abs(got["zeta"] - 2.0) <= 1e-3 and abs(got["psi"] - 0.3) <= 1e-3
    assert main(["kl", params, "--env", "9"]) == 1
    assert main(["kl", params, "--manifest", str(tmp / "d" / "manifest.json")]) == 0
