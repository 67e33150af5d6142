import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

from shadowdr.cli import main
from shadowdr.data import Dataset
from shadowdr.errors import ConfigError, DataError, SampleSizeError
from shadowdr.io import config_hash, load_config, parse_config, read_dataset, write_dataset
from shadowdr.simulation import ScenarioConfig, generate_dataset

HEADER = "x1,x2,z,r,y\n"


def _write(path, text):
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def dataset_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "data.csv"
    write_dataset(generate_dataset(ScenarioConfig(n=800), 3), path)
    return path


def _config(tmp_path, doc):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


# --- datasets ------------------------------------------------------------------


def test_round_trip_is_exact(tmp_path):
    data = generate_dataset(ScenarioConfig(n=300), 1)
    path = tmp_path / "d.csv"
    write_dataset(data, path)
    back = read_dataset(path)
    for a, b in ((data.x, back.x), (data.z, back.z), (data.r, back.r)):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(data.y[data.observed], back.y[back.observed])
    assert np.all(np.isnan(back.y[~back.observed]))


def test_columns_may_come_in_any_order(tmp_path):
    path = _write(tmp_path / "d.csv", "y,r,z,x2,x1\n1.5,1,0.2,3,4\n,0,0.1,5,6\n")
    d = read_dataset(path)
    np.testing.assert_array_equal(d.x, [[4, 3], [6, 5]])
    assert d.r.tolist() == [1, 0]


@pytest.mark.parametrize(
    "body, line",
    [
        ("0.1,0.2,0.3,1,1.0\n0.1,0.2,0.3,0,2.0\n", 3),  # y present with r = 0
        ("0.1,0.2,0.3,1,\n", 2),  # y missing with r = 1
        ("0.1,0.2,0.3,2,1.0\n", 2),  # bad r
        ("0.1,abc,0.3,1,1.0\n", 2),  # non-numeric
        ("0.1,0.2,nan,1,1.0\n", 2),  # non-finite
        ("0.1,0.2,0.3,1.0\n", 2),  # wrong field count
        ("0.1,0.2,0.3,1,1.0\n\n0.1,0.2,0.3,1,x\n", 4),
    ],
)
def test_bad_rows_cite_their_line(tmp_path, body, line):
    path = _write(tmp_path / "d.csv", HEADER + body)
    with pytest.raises(DataError) as info:
        read_dataset(path)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


@pytest.mark.parametrize("header", ["x1,z,r\n", "x1,x3,z,r,y\n", "x1,z,r,y,w\n", "x1,x1,z,r,y\n"])
def test_bad_headers(tmp_path, header):
    with pytest.raises(DataError):
        read_dataset(_write(tmp_path / "d.csv", header))


def test_empty_files(tmp_path):
    with pytest.raises(SampleSizeError):
        read_dataset(_write(tmp_path / "a.csv", ""))
    with pytest.raises(SampleSizeError):
        read_dataset(_write(tmp_path / "b.csv", HEADER))


# --- configuration -------------------------------------------------------------


def test_config_defaults_and_hash():
    cfg = parse_config({})
    assert cfg.bootstrap_B == 200 and cfg.seed == 0
    assert cfg.config_hash == config_hash({})
    assert parse_config({"seed": 1}).config_hash != cfg.config_hash


@pytest.mark.parametrize(
    "doc",
    [
        {"unknown": 1},
        {"model": {"odds_ratio": ["y"], "colour": "red"}},
        {"bootstrap": {"B": 1}},
        {"seed": -3},
        {"model": {"odds_ratio": ["z"]}},
        {"model": {"q": "y"}},
        {"study": {"replications": 0, "grid": {}}},
        {"study": {"replications": 5}},
        {"study": {"replications": 5, "grid": {"name": "x"}}},
        {"study": {"replications": 5, "scenarios": [{"b_y": 0.0}]}},
        {"solver": {"tol": 0}},
    ],
)
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_config_model_choices(tmp_path):
    doc = {
        "seed": 4,
        "model": {"odds_ratio": ["y"], "propensity": ["x1", "x2", "x1^2"], "outcome": ["x1", "x2"], "g": "x2", "q": "1"},
        "bootstrap": {"B": 30},
        "study": {"replications": 2, "grid": {"n": 500, "c_y": -0.3}},
    }
    cfg = load_config(_config(tmp_path, doc))
    assert cfg.pipeline.basis.propensity_design.names() == ["1", "x1", "x2", "x1^2"]
    assert cfg.pipeline.outcome_design.names() == ["1", "x1", "x2"]
    assert cfg.bootstrap().B == 30 and cfg.bootstrap().seed == 4
    assert [s.c_y for s in cfg.scenarios()] == [-0.3] * 4
    assert cfg.with_seed(9).seed == 9


def test_config_yaml_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "bad.yaml", "model: [unclosed"))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


# --- command line --------------------------------------------------------------


def test_estimate_command(tmp_path, dataset_file, capsys):
    cfg = _config(tmp_path, {"bootstrap": {"B": 10}, "model": {"propensity": ["x1", "x2", "x1^2"], "outcome": ["x1", "x2", "x2^2", "x1^2"], "g": "m0"}})
    out = tmp_path / "out"
    code = main(["estimate", "--data", str(dataset_file), "--config", str(cfg), "--out-dir", str(out), "--seed", "5"])
    assert code == 0
    doc = json.loads((out / "estimate.json").read_text())
    for k in ("mu_reg", "mu1", "mu2", "mu3", "phi_hat", "psi_hat"):
        assert np.isfinite(doc[k])
        assert doc["se"][k.replace("_hat", "")] > 0
    assert doc["seed"] == 5 and len(doc["config_hash"]) == 64
    assert set(doc["gof"]) == {"phi", "psi"}
    assert "mu2" in (out / "estimate.txt").read_text()
    assert "statistic" in capsys.readouterr().out


def test_estimate_reruns_are_byte_identical(tmp_path, dataset_file):
    cfg = _config(tmp_path, {"bootstrap": {"B": 5}})
    for name in ("a", "b"):
        assert main(["estimate", "--data", str(dataset_file), "--config", str(cfg), "--out-dir", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "estimate.json").read_bytes() == (tmp_path / "b" / "estimate.json").read_bytes()


def test_gof_command(tmp_path, dataset_file):
    cfg = _config(tmp_path, {"bootstrap": {"B": 10}})
    assert main(["gof", "--data", str(dataset_file), "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "gof.json").read_text())
    for name in ("phi", "psi"):
        t = doc["tests"][name]
        assert 0 <= t["p_value"] <= 1
        assert t["verdict"]
    assert "verdict" in (tmp_path / "gof.txt").read_text()


def test_gof_on_complete_data_is_a_data_error(tmp_path, capsys):
    n = 50
    rng = np.random.default_rng(0)
    y = rng.standard_normal(n)
    data = Dataset(rng.standard_normal((n, 2)), y + rng.standard_normal(n), np.ones(n, int), y)
    path = tmp_path / "full.csv"
    write_dataset(data, path)
    cfg = _config(tmp_path, {"bootstrap": {"B": 4}})
    assert main(["gof", "--data", str(path), "--config", str(cfg), "--out-dir", str(tmp_path)]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "DegenerateWeightsError"


def test_simulate_command_is_deterministic(tmp_path):
    doc = {"seed": 3, "study": {"replications": 2, "check_truth": False, "grid": {"n": 300}}}
    cfg = _config(tmp_path, doc)
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / name)]) == 0
    for f in ("summary.csv", "replications.csv", "study.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    long = pd.read_csv(tmp_path / "a" / "replications.csv")
    assert list(long.columns) == ["config_hash", "seed", "scenario", "estimator", "replication", "estimate"]
    summary = pd.read_csv(tmp_path / "a" / "summary.csv")
    assert set(summary["scenario"]) == {"both_correct", "outcome_correct", "propensity_correct", "both_wrong"}
    assert (summary["seed"] == 3).all()


def test_simulate_then_estimate_round_trip(tmp_path):
    cfg = _config(tmp_path, {"bootstrap": {"B": 3}, "study": {"replications": 2, "scenarios": [{"name": "s", "n": 400, "seed": 8}]}})
    assert main(["generate", "--config", str(cfg), "--out-dir", str(tmp_path), "--name", "g.csv"]) == 0
    data = read_dataset(tmp_path / "g.csv")
    direct = generate_dataset(ScenarioConfig(name="s", n=400, seed=8))
    np.testing.assert_array_equal(data.z, direct.z)


def test_exit_codes(tmp_path, dataset_file, capsys):
    bad_cfg = _write(tmp_path / "bad.yaml", "colour: red\n")
    assert main(["estimate", "--data", str(dataset_file), "--config", str(bad_cfg)]) == 2
    zero = _config(tmp_path, {"study": {"replications": 0, "grid": {}}})
    assert main(["simulate", "--config", str(zero), "--out-dir", str(tmp_path)]) == 2
    bad_data = _write(tmp_path / "d.csv", HEADER + "0.1,0.2,0.3,0,1.0\n")
    assert main(["estimate", "--data", str(bad_data), "--out-dir", str(tmp_path)]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["line"] == 2
    empty = _write(tmp_path / "e.csv", HEADER)
    assert main(["estimate", "--data", str(empty), "--out-dir", str(tmp_path)]) == 3
    # an iteration budget of one cannot solve the calibration equations
    tight = _config(tmp_path, {"solver": {"max_iter": 1}, "bootstrap": {"B": 2}})
    assert main(["estimate", "--data", str(dataset_file), "--config", str(tight), "--out-dir", str(tmp_path)]) == 4
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["type"] == "ConvergenceError" and "final_norm" in err["error"]


def test_oracle_inconsistency_exit_code(tmp_path, monkeypatch):
    from shadowdr import simulation

    monkeypatch.setattr(simulation, "analytic_mean", lambda c: 42.0)
    monkeypatch.setattr(simulation, "_TRUTH_CACHE", {})
    cfg = _config(tmp_path, {"study": {"replications": 2, "scenarios": [{"name": "s", "n": 200}]}})
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 5


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "shadowdr", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip().startswith("shadowdr")
