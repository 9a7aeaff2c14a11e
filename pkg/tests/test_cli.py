import csv
import json
import warnings

import numpy as np
import pytest

from panelqr.cli import EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_OK, EXIT_SOLVER, EXIT_STUDY, main
from panelqr.simulation import Scenario

from conftest import make_panel


@pytest.fixture
def panel_csv(tmp_path):
    d = make_panel(np.random.default_rng(8), N=15, T=6, p=1)
    path = tmp_path / "panel.csv"
    d.to_csv(path)
    return path


def data_args(path, out, *extra):
    return ["--data", str(path), "--unit", "unit", "--time", "time", "--y", "y", "--x", "x1", "--out", str(out), *extra]


def read_json(path):
    return json.loads(path.read_text())


def test_fit_unpenalized(panel_csv, tmp_path, capsys):
    out = tmp_path / "fit"
    assert main(["fit", *data_args(panel_csv, out, "--tau", "0.5", "--lambda", "0")]) == EXIT_OK
    fit = read_json(out / "fit.json")
    assert fit["manifest"] == "manifest.json"
    assert fit["lambda"] == 0.0 and fit["active_count"] == 15
    assert fit["certificate"]["passed"]
    man = read_json(out / "manifest.json")
    assert man["command"] == "fit" and set(man["outputs"]) >= {"fit.json", "residuals.csv"}
    assert str(panel_csv) in man["inputs"]
    rows = list(csv.DictReader(open(out / "residuals.csv")))
    assert len(rows) == 90 and "residual" in rows[0]
    assert json.loads(capsys.readouterr().out)["beta"] == fit["beta"]


def test_fit_tuned(panel_csv, tmp_path):
    out = tmp_path / "tuned"
    assert main(["fit", *data_args(panel_csv, out, "--tau", "0.75", "--tune", "gcv", "--grid-points", "6")]) == EXIT_OK
    man = read_json(out / "manifest.json")
    trace = read_json(out / "tuning.json")
    assert man["chosen_lambda"] == trace["chosen_lambda"] == read_json(out / "fit.json")["lambda"]
    assert len(list(csv.DictReader(open(out / "tables" / "tuning.csv")))) == 6


def test_fit_above_bound_warns(panel_csv, tmp_path, capsys):
    out = tmp_path / "big"
    assert main(["fit", *data_args(panel_csv, out, "--tau", "0.5", "--lambda", "3.5")]) == EXIT_OK
    assert "upper bound" in capsys.readouterr().err
    assert all(a == 0.0 for a in read_json(out / "fit.json")["alpha"])


def test_fit_input_errors(panel_csv, tmp_path, capsys):
    bad = ["fit", *data_args(panel_csv, tmp_path / "o", "--tau", "0.5")]
    bad[bad.index("x1")] = "nope"
    assert main(bad) == EXIT_INPUT
    assert "nope" in capsys.readouterr().err
    assert main(["fit", *data_args(tmp_path / "missing.csv", tmp_path / "o", "--tau", "0.5")]) == EXIT_INPUT
    assert main(["fit", *data_args(panel_csv, tmp_path / "o", "--tau", "1.5")]) == EXIT_INPUT


def test_bootstrap_outputs_and_determinism(panel_csv, tmp_path):
    args = ["--tau", "0.5", "--lambda", "0.3", "--method", "wb1", "--B", "40", "--seed", "9", "--workers", "1"]
    with pytest.warns(UserWarning):
        assert main(["bootstrap", *data_args(panel_csv, tmp_path / "a", *args)]) == EXIT_OK
        assert main(["bootstrap", *data_args(panel_csv, tmp_path / "b", *args)]) == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "draws.csv").read_bytes() == (b / "draws.csv").read_bytes()
    inf = read_json(a / "inference.json")
    row = inf["coefficients"][0]
    assert row["ci_low"] <= row["ci_high"] and row["se"] > 0
    assert inf["manifest"] == "manifest.json" and inf["seed"] == 9
    omega = np.loadtxt(a / "tables" / "omega_star.csv", delimiter=",", ndmin=2)
    assert omega.shape == (1, 1) and omega[0, 0] >= 0
    ma, mb = read_json(a / "manifest.json"), read_json(b / "manifest.json")
    for m in (ma, mb):
        for k in ("timestamp", "wall_time_seconds"):
            m.pop(k)
        m["config"].pop("out")
    assert ma == mb


def test_wb2_with_zero_threshold_matches_wb1(panel_csv, tmp_path):
    common = ["--tau", "0.5", "--lambda", "0.3", "--B", "25", "--seed", "4", "--workers", "1"]
    with pytest.warns(UserWarning):
        main(["bootstrap", *data_args(panel_csv, tmp_path / "w1", *common, "--method", "wb1")])
        main(["bootstrap", *data_args(panel_csv, tmp_path / "w2", *common, "--method", "wb2", "--a-T", "0")])
    assert (tmp_path / "w1" / "draws.csv").read_text() == (tmp_path / "w2" / "draws.csv").read_text()


def test_seed_from_environment(panel_csv, tmp_path, monkeypatch):
    monkeypatch.setenv("PANELQR_SEED", "4")
    common = ["--tau", "0.5", "--lambda", "0.3", "--B", "25", "--workers", "1"]
    with pytest.warns(UserWarning):
        main(["bootstrap", *data_args(panel_csv, tmp_path / "env", *common)])
        main(["bootstrap", *data_args(panel_csv, tmp_path / "flag", *common, "--seed", "4")])
    assert read_json(tmp_path / "env" / "manifest.json")["seed"] == 4
    assert (tmp_path / "env" / "draws.csv").read_text() == (tmp_path / "flag" / "draws.csv").read_text()
    monkeypatch.setenv("PANELQR_SEED", "abc")
    assert main(["bootstrap", *data_args(panel_csv, tmp_path / "bad", *common)]) == EXIT_INPUT


def test_bootstrap_failure_exit_code(panel_csv, tmp_path, monkeypatch):
    from panelqr import resampling

    def boom(*a, **k):
        raise resampling.SolverError("forced")

    monkeypatch.setattr(resampling._ipm, "solve_batch", boom)
    monkeypatch.setattr(resampling, "fit", boom)
    args = ["--tau", "0.5", "--lambda", "0.3", "--B", "25", "--seed", "1", "--workers", "1"]
    assert main(["bootstrap", *data_args(panel_csv, tmp_path / "f", *args)]) == EXIT_SOLVER


@pytest.fixture
def scenario_json(tmp_path):
    p = tmp_path / "scenario.json"
    p.write_text(Scenario(N=10, T=5, seed=2).to_json())
    return p


@pytest.mark.parametrize(
    "study, table, extra",
    [
        ("coverage", "table1.csv", ["--grid-points", "4"]),
        ("size", "table2.csv", ["--lambda", "0.2"]),
        ("se", "figure1.csv", ["--lambda-grid", "0.05,0.2", "--methods", "wb1"]),
    ],
)
def test_simulate(scenario_json, tmp_path, study, table, extra):
    out = tmp_path / study
    argv = ["simulate", "--scenario", str(scenario_json), "--study", study, "--M", "3", "--B", "20", "--workers", "1", "--out", str(out), *extra]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # B=20 is below the recommended draw count
        assert main(argv) == EXIT_OK
    res = read_json(out / "study.json")
    assert res["manifest"] == "manifest.json" and res["kind"] == study
    assert (out / "tables" / table).exists()
    assert f"tables/{table}" in read_json(out / "manifest.json")["outputs"]


def test_simulate_resumes(scenario_json, tmp_path):
    out = tmp_path / "sim"
    argv = ["simulate", "--scenario", str(scenario_json), "--study", "size", "--M", "3", "--B", "20", "--lambda", "0.2", "--methods", "wb1", "--workers", "1", "--out", str(out)]
    with pytest.warns(UserWarning):
        main(argv)
        first = (out / "tables" / "table2.csv").read_text()
        main(argv)
    assert (out / "tables" / "table2.csv").read_text() == first
    assert len((out / "replicates.jsonl").read_text().splitlines()) == 3


def test_simulate_study_failure(scenario_json, tmp_path, monkeypatch):
    from panelqr import simulation

    def boom(*a, **k):
        raise RuntimeError("forced")

    monkeypatch.setattr(simulation, "_replicate", boom)
    argv = ["simulate", "--scenario", str(scenario_json), "--study", "coverage", "--M", "2", "--B", "20", "--workers", "1", "--out", str(tmp_path / "x")]
    assert main(argv) == EXIT_STUDY


@pytest.mark.parametrize(
    "argv, code",
    [
        (["--tau", "0.5"], EXIT_OK),
        (["--tau", "0.25"], EXIT_OK),
        (["--tau", "0.5", "--scheme", "he"], EXIT_OK),
        (["--tau", "0.25", "--swapped-masses"], EXIT_CHECK_FAILED),
        (["--tau", "0.05", "--scheme", "he"], EXIT_INPUT),
    ],
)
def test_weights_check(argv, code, capsys):
    assert main(["weights-check", *argv]) == code
    out = capsys.readouterr()
    if code == EXIT_CHECK_FAILED:
        assert "FAIL" in out.out
    if code == EXIT_INPUT:
        assert "1/8" in out.err or "0.125" in out.err
