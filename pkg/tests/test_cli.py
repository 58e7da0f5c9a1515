import csv
import json
import math

import numpy as np
import pytest

from survcalib.cli import main
from survcalib.simulate import Scenario


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "subjects.csv"
    rows = [
        # id, time, event, z1, q1, w1, x1, w2, x2
        ("a", 4.0, 1, 0.5, 1, 1.0, 0, 2.5, 1),
        ("b", 3.5, 1, -0.2, 0, 0.8, 0, 2.0, 0),
        ("c", 2.8, 0, 0.1, 1, 1.5, 1, "", ""),
        ("d", 5.0, 1, 0.9, 0, 2.2, 0, 4.0, 1),
        ("e", 1.2, 1, -0.7, 1, "", "", "", ""),
        ("f", 4.6, 0, 0.3, 0, 1.1, 0, 3.9, 1),
        ("g", 3.9, 1, -0.1, 1, 0.6, 1, "", ""),
        ("h", 4.9, 0, 0.0, 0, 2.8, 0, "", ""),
        ("i", 4.7, 1, 0.4, 0, 1.9, 0, 4.4, 0),
        ("j", 4.2, 0, -0.5, 1, 2.4, 0, 4.0, 0),
        ("k", 3.6, 1, 0.2, 0, 1.3, 0, 3.2, 0),
        ("l", 4.8, 0, -0.3, 0, 0.9, 0, 4.5, 0),
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "time", "event", "z1", "q1", "w1", "x1", "w2", "x2"])
        writer.writerows(rows)
    return str(path)


@pytest.fixture
def config_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "id": "id", "time": "time", "event": "event",
        "z": ["z1"], "q": ["q1"],
        "questionnaires": [["w1", "x1"], ["w2", "x2"]],
        "terminal": True,
    }))
    return str(path)


class TestFitCommand:
    def test_lvcf_output_matches_enumeration_oracle(self, toy_csv, config_json, tmp_path):
        out = tmp_path / "fit.json"
        rc = main(["fit", "--input", toy_csv, "--config", config_json,
                   "--method", "lvcf", "--out", str(out)])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload["n_subjects"] == 12
        assert payload["n_events"] == 7
        rec = payload["methods"]["lvcf"]
        assert rec["converged"]
        # golden value: LVCF paths jump at the first positive measurement, so
        # the exhaustive-enumeration oracle applies with that change time
        from test_estimators import oracle_newton

        with open(toy_csv) as fh:
            rows = list(csv.DictReader(fh))
        obs = np.array([float(r["time"]) for r in rows])
        ev = np.array([r["event"] == "1" for r in rows])
        z = np.array([[float(r["z1"])] for r in rows])
        v_eff = []
        for r in rows:
            first_pos = math.inf
            for wcol, xcol in (("w1", "x1"), ("w2", "x2")):
                if r[wcol] and r[xcol] == "1":
                    first_pos = min(first_pos, float(r[wcol]))
            v_eff.append(first_pos)
        oracle = oracle_newton(obs, ev, z, np.array(v_eff), 2)
        assert rec["beta"] == pytest.approx(oracle[0], abs=1e-7)
        again = tmp_path / "fit2.json"
        assert main(["fit", "--input", toy_csv, "--config", config_json,
                     "--method", "lvcf", "--out", str(again)]) == 0
        assert json.loads(again.read_text())["methods"]["lvcf"]["beta"] == rec["beta"]

    def test_oc_with_knot_selection_trace(self, toy_csv, config_json, tmp_path):
        out = tmp_path / "fit.json"
        rc = main(["fit", "--input", toy_csv, "--config", config_json,
                   "--method", "oc", "--family", "ph-spline",
                   "--knots", "1,2", "--degree", "2", "--out", str(out)])
        assert rc == 0
        payload = json.loads(out.read_text())
        trace = payload["calibration"]["knot_trace"]
        assert [rec["m"] for rec in trace] == [1, 2]
        assert all("bic" in rec for rec in trace)
        assert payload["calibration"]["selected_m"] in (1, 2)

    def test_unknown_method_usage_error(self, toy_csv, config_json, tmp_path):
        rc = main(["fit", "--input", toy_csv, "--config", config_json,
                   "--method", "locf", "--out", str(tmp_path / "x.json")])
        assert rc == 2

    def test_missing_column_fails_with_name(self, toy_csv, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({
            "id": "id", "time": "time", "event": "event",
            "z": ["z1"], "q": ["nope"],
            "questionnaires": [["w1", "x1"]],
        }))
        rc = main(["fit", "--input", toy_csv, "--config", str(bad),
                   "--out", str(tmp_path / "x.json")])
        assert rc == 2
        assert "nope" in capsys.readouterr().err

    def test_trajectories_csv(self, toy_csv, config_json, tmp_path):
        out = tmp_path / "fit.json"
        traj = tmp_path / "paths.csv"
        rc = main(["fit", "--input", toy_csv, "--config", config_json,
                   "--method", "oc", "--knots", "1", "--degree", "2",
                   "--out", str(out), "--trajectories", str(traj)])
        assert rc == 0
        with open(traj) as fh:
            rows = list(csv.DictReader(fh))
        assert {r["id"] for r in rows} == set("abcdefghijkl")
        probs = [float(r["prob_exposed"]) for r in rows]
        assert all(0.0 <= p <= 1.0 for p in probs)

    def test_ci_round_trip_from_json(self, toy_csv, config_json, tmp_path):
        out = tmp_path / "fit.json"
        main(["fit", "--input", toy_csv, "--config", config_json,
              "--method", "lvcf", "--out", str(out)])
        rec = json.loads(out.read_text())["methods"]["lvcf"]
        z = 1.959963984540054
        lo = rec["beta"] - z * rec["se_beta"]
        assert rec["ci_beta"][0] == pytest.approx(lo, rel=1e-12)
        assert rec["ci_hr"][0] == pytest.approx(math.exp(lo), rel=1e-12)


class TestSimulateCommand:
    def test_reproducible_csv(self, tmp_path):
        scen = tmp_path / "scenario.json"
        scen.write_text(Scenario(n=120, beta0=0.0, m_star=2, seed=5).to_json())
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (out1, out2):
            rc = main(["simulate", "--scenario", str(scen), "--reps", "2",
                       "--method", "lvcf", "--out", str(out)])
            assert rc == 0
        assert out1.read_text() == out2.read_text()
        with open(out1) as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["Method"] == "LVCF"
        assert rows[0]["n_used"] == "2"

    def test_unknown_method_lists_valid(self, tmp_path, capsys):
        scen = tmp_path / "scenario.json"
        scen.write_text(Scenario(n=100, seed=1).to_json())
        rc = main(["simulate", "--scenario", str(scen), "--reps", "1",
                   "--method", "bogus", "--out", str(tmp_path / "o.csv")])
        assert rc == 2
        assert "lvcf" in capsys.readouterr().err

    def test_invalid_scenario_json(self, tmp_path):
        scen = tmp_path / "scenario.json"
        scen.write_text("{not json")
        rc = main(["simulate", "--scenario", str(scen), "--reps", "1",
                   "--out", str(tmp_path / "o.csv")])
        assert rc == 2


class TestCurvesCommand:
    def test_single_interval_step_curve(self, tmp_path, config_json):
        path = tmp_path / "one.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "time", "event", "z1", "q1", "w1", "x1", "w2", "x2"])
            writer.writerow(["a", 5.0, 1, 0.0, 0, 1.0, 0, 2.0, 1])
        out = tmp_path / "curves.csv"
        rc = main(["curves", "--input", str(path), "--config", config_json,
                   "--family", "npmle", "--out", str(out)])
        assert rc == 0
        with open(out) as fh:
            rows = [r for r in csv.DictReader(fh)]
        vals = {(round(float(r["time"]), 6)): float(r["survival"]) for r in rows}
        assert vals[0.0] == 1.0
        assert vals[2.0] == 0.0

    def test_stratified_output_has_two_groups(self, toy_csv, config_json, tmp_path):
        out = tmp_path / "curves.csv"
        rc = main(["curves", "--input", toy_csv, "--config", config_json,
                   "--family", "npmle", "--stratify-by", "q1", "--out", str(out)])
        assert rc == 0
        with open(out) as fh:
            strata = {r["stratum"] for r in csv.DictReader(fh)}
        assert strata == {"q1=0", "q1=1"}

    def test_weibull_curve_matches_closed_form(self, tmp_path, config_json):
        rng = np.random.default_rng(0)
        n = 3000
        v = rng.exponential(2.0, n)
        path = tmp_path / "sim.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "time", "event", "z1", "q1", "w1", "x1", "w2", "x2"])
            for i in range(n):
                w1, w2 = sorted(rng.uniform(0, 6, 2))
                writer.writerow([i, 10.0, 0, 0.0, 0, round(w1, 6), int(w1 >= v[i]),
                                 round(w2, 6), int(w2 >= v[i])])
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "id": "id", "time": "time", "event": "event", "z": ["z1"], "q": ["q1"],
            "questionnaires": [["w1", "x1"], ["w2", "x2"]], "terminal": False,
        }))
        out = tmp_path / "curves.csv"
        rc = main(["curves", "--input", str(path), "--config", str(cfg),
                   "--family", "weibull", "--out", str(out)])
        assert rc == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        for r in rows[:: max(1, len(rows) // 25)]:
            t, s = float(r["time"]), float(r["survival"])
            assert s == pytest.approx(math.exp(-t / 2.0), abs=0.02)
