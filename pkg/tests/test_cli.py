"""End-to-end checks of the command-line surface.

Most tests drive ``main`` in-process and read files from ``tmp_path``; one
subprocess test covers warning routing to stderr.  Error-path tests assert
both the exit code and the structured JSON message.
"""

import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from gattlab.cli import _preset_jobs, main

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def toy_task_cfg(data, **overrides):
    cfg = {
        "data": data,
        "tau": 1,
        "outcome_family": "binomial",
        "policy": {"rule": "constant", "value": 0},
        "conditioning": {"set": "values", "values": [1]},
        "folds": 2,
        "learners": {
            "m": [{"kind": "glm"}],
            "G": [{"kind": "glm"}],
            "alpha": {"kind": "glm", "interaction_order": 1},
        },
        "seed": 3,
    }
    cfg.update(overrides)
    return cfg


def expect_error(capsys, argv, code, fragment):
    assert main(argv) == code
    err = capsys.readouterr().err
    payload = json.loads(err.strip().splitlines()[-1])
    assert fragment in payload["error"]


@pytest.fixture(scope="module")
def toy_csv(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    cfg = write_json(root / "sim.json", {"dgp": {"kind": "att_toy", "seed": 11}, "n": 2000})
    out = root / "toy.csv"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    return out


class TestConfigValidation:
    def test_unknown_top_level_key_is_rejected(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv")
        cfg["polcy"] = cfg.pop("policy")
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "unknown keys ['polcy']")

    def test_unknown_rule_kind(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv", policy={"rule": "swap"})
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "unknown rule 'swap'")

    def test_rule_missing_required_field(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv", policy={"rule": "threshold_shift", "delta": -1})
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "missing keys")

    def test_policy_list_length_must_match_tau(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv", policy=[{"rule": "identity"}, {"rule": "identity"}])
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "must list 1 rules")

    def test_unknown_learner_key(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv")
        cfg["learners"]["m"] = [{"kind": "glm", "depth": 3}]
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "unknown keys ['depth']")

    def test_unknown_estimator_name(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv", estimators=["sub", "aipw"])
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "unknown names ['aipw']")

    def test_duplicate_estimators_rejected(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv", estimators=["tmle", "tmle"])
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "duplicate")

    def test_invalid_riesz_mode(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv", riesz_mode="projection")
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "riesz_mode")

    def test_config_not_json(self, tmp_path, capsys):
        path = tmp_path / "t.json"
        path.write_text("{not json")
        expect_error(capsys, ["estimate", "--config", str(path)], 2, "not valid JSON")

    def test_config_file_missing(self, tmp_path, capsys):
        expect_error(
            capsys, ["estimate", "--config", str(tmp_path / "nope.json")], 2, "cannot read config"
        )

    def test_per_period_m_pools_need_one_entry_per_period(self, tmp_path, capsys):
        cfg = toy_task_cfg("x.csv")
        cfg["learners"]["m"] = [[{"kind": "glm"}], [{"kind": "glm"}]]
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 2, "must have 1 entries")

    def test_interval_set_and_shift_rule_parse(self, toy_csv, tmp_path, capsys):
        # interval [1, 1] picks out the treated units, same as the value set
        cfg = toy_task_cfg(
            str(toy_csv),
            policy={"rule": "additive_shift", "delta": -1, "bound": 0, "direction": "down"},
            conditioning={"set": "interval", "lower": 1, "upper": 1},
            estimators=["sub"],
        )
        path = write_json(tmp_path / "t.json", cfg)
        assert main(["estimate", "--config", path]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["results"][0]["n_conditioning"] == 798


class TestSimulate:
    def test_repeat_is_byte_identical(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"dgp": {"kind": "sim1", "seed": 5}, "n": 200})
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["simulate", "--config", cfg, "--out", str(a)]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_column_layout_sim1(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"dgp": {"kind": "sim1", "seed": 5}, "n": 50})
        out = tmp_path / "d.csv"
        main(["simulate", "--config", cfg, "--out", str(out)])
        frame = pd.read_csv(out)
        assert list(frame.columns) == [
            "L1_1", "A1", "L2_1", "A2", "L3_1", "A3", "L4_1", "A4", "Y",
        ]
        assert len(frame) == 50

    def test_seed_flag_changes_draws(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"dgp": {"kind": "att_toy", "seed": 5}, "n": 300})
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["simulate", "--config", cfg, "--out", str(a)])
        main(["simulate", "--config", cfg, "--out", str(b), "--seed", "6"])
        assert a.read_bytes() != b.read_bytes()

    def test_stdout_when_out_omitted(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "s.json", {"dgp": {"kind": "att_toy", "seed": 1}, "n": 10})
        assert main(["simulate", "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert out.startswith("L1_1,A1,Y")
        assert len(out.strip().splitlines()) == 11


class TestEstimate:
    def test_toy_pipeline_recovers_att(self, toy_csv, tmp_path):
        path = write_json(tmp_path / "t.json", toy_task_cfg(str(toy_csv)))
        out = tmp_path / "res.json"
        assert main(["estimate", "--config", path, "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["n"] == 2000
        by_name = {r["estimator"]: r for r in payload["results"]}
        assert set(by_name) == {"sub", "ipw", "tmle"}
        tmle = by_name["tmle"]
        assert abs(tmle["theta_hat"] - 0.24) < 0.05
        assert tmle["ci_low"] < 0.24 < tmle["ci_high"]
        assert abs(tmle["diagnostics"]["mean_eif"]) <= 1e-6

    def test_identity_trivial_equals_mean_outcome(self, toy_csv, tmp_path, capsys):
        cfg = toy_task_cfg(
            str(toy_csv),
            policy={"rule": "identity"},
            conditioning={"set": "all"},
            estimators=["sub"],
            folds=1,
        )
        path = write_json(tmp_path / "t.json", cfg)
        assert main(["estimate", "--config", path]) == 0
        payload = json.loads(capsys.readouterr().out)
        mean_y = pd.read_csv(toy_csv)["Y"].mean()
        assert payload["results"][0]["theta_hat"] == pytest.approx(mean_y, abs=1e-8)

    def test_empty_stratum_exits_nonzero(self, toy_csv, tmp_path, capsys):
        cfg = toy_task_cfg(str(toy_csv), conditioning={"set": "values", "values": [7]})
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["estimate", "--config", path], 1, "empty conditioning stratum")

    def test_repeat_estimate_is_byte_identical(self, toy_csv, tmp_path):
        path = write_json(tmp_path / "t.json", toy_task_cfg(str(toy_csv)))
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["estimate", "--config", path, "--out", str(a)]) == 0
        assert main(["estimate", "--config", path, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_seed_flag_overrides_config(self, toy_csv, tmp_path, capsys):
        path = write_json(tmp_path / "t.json", toy_task_cfg(str(toy_csv)))
        assert main(["estimate", "--config", path, "--seed", "77"]) == 0
        assert json.loads(capsys.readouterr().out)["seed"] == 77

    def test_data_can_be_a_generating_process(self, tmp_path, capsys):
        cfg = toy_task_cfg({"kind": "att_toy", "n": 500, "seed": 4})
        path = write_json(tmp_path / "t.json", cfg)
        assert main(["estimate", "--config", path]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["n"] == 500
        assert payload["outcome_family"] == "binomial"

    def test_comparability_warning_routes_to_stderr(self, tmp_path):
        # conditioning after the policy starts shifting history is flagged
        # on stderr but the run still completes
        cfg = {
            "data": {"kind": "sim2", "tau": 2, "n": 400, "seed": 2},
            "tau": 2,
            "policy": {"rule": "constant", "value": 1},
            "conditioning": [{"set": "all"}, {"set": "values", "values": [1]}],
            "estimators": ["sub"],
            "folds": 1,
            "seed": 1,
        }
        path = write_json(tmp_path / "t.json", cfg)
        proc = subprocess.run(
            [sys.executable, "-m", "gattlab.cli", "estimate", "--config", path],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "comparab" in proc.stderr.lower()
        payload = json.loads(proc.stdout)
        assert np.isfinite(payload["results"][0]["theta_hat"])


class TestTruth:
    def test_att_toy_truth_matches_enumeration(self, tmp_path, capsys):
        cfg = {
            "dgp": {"kind": "att_toy"},
            "policy": {"rule": "constant", "value": 0},
            "conditioning": {"set": "values", "values": [1]},
            "M": 100000,
            "seed": 5,
        }
        path = write_json(tmp_path / "t.json", cfg)
        assert main(["truth", "--config", path]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["mc_se"] > 0
        assert abs(payload["theta_true"] - 0.24) < 4 * payload["mc_se"]

    def test_tau_mismatch_rejected(self, tmp_path, capsys):
        cfg = {
            "dgp": {"kind": "att_toy"},
            "tau": 2,
            "policy": {"rule": "identity"},
            "conditioning": {"set": "all"},
        }
        path = write_json(tmp_path / "t.json", cfg)
        expect_error(capsys, ["truth", "--config", path], 2, "does not match the process horizon")


def replicate_cfg():
    return {
        "dgp": {"kind": "att_toy"},
        "cells": [
            {
                "label": "toy",
                "task": {
                    "tau": 1,
                    "policy": {"rule": "constant", "value": 0},
                    "conditioning": {"set": "values", "values": [1]},
                    "folds": 1,
                    "learners": {
                        "m": [{"kind": "glm"}],
                        "G": [{"kind": "glm"}],
                        "alpha": {"kind": "glm", "interaction_order": 1},
                    },
                },
            }
        ],
        "scenarios": [1],
        "n_grid": [200],
        "replicates": 2,
        "seed": 9,
        "truths": {"toy": [0.24, 0.001]},
    }


class TestReplicate:
    def test_explicit_grid_runs(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("GATTLAB_THREADS", raising=False)
        path = write_json(tmp_path / "r.json", replicate_cfg())
        out = tmp_path / "rep.csv"
        assert main(["replicate", "--config", path, "--out", str(out)]) == 0
        assert "MAEx100" in capsys.readouterr().out
        frame = pd.read_csv(out)
        assert list(frame.columns) == ["task", "scenario", "n", "estimator", "metric", "value"]
        reps = frame[(frame.estimator == "tmle") & (frame.metric == "n_reps")]
        assert reps["value"].tolist() == [2.0]

    def test_thread_count_does_not_change_output(self, tmp_path, monkeypatch):
        monkeypatch.delenv("GATTLAB_THREADS", raising=False)
        path = write_json(tmp_path / "r.json", replicate_cfg())
        base, flagged, via_env = (tmp_path / name for name in ("a.csv", "b.csv", "c.csv"))
        assert main(["replicate", "--config", path, "--out", str(base)]) == 0
        assert main(["replicate", "--config", path, "--out", str(flagged), "--threads", "2"]) == 0
        monkeypatch.setenv("GATTLAB_THREADS", "3")
        assert main(["replicate", "--config", path, "--out", str(via_env)]) == 0
        assert base.read_bytes() == flagged.read_bytes() == via_env.read_bytes()

    def test_bad_thread_env_rejected(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("GATTLAB_THREADS", "zero")
        path = write_json(tmp_path / "r.json", replicate_cfg())
        expect_error(capsys, ["replicate", "--config", path], 2, "GATTLAB_THREADS")

    def test_unknown_scenario_rejected(self, tmp_path, capsys):
        cfg = replicate_cfg()
        cfg["scenarios"] = [9]
        path = write_json(tmp_path / "r.json", cfg)
        expect_error(capsys, ["replicate", "--config", path], 2, "scenario")

    @pytest.mark.parametrize(
        "name",
        ["sim1_smoke.json", "sim1_table.json", "sim2_smoke.json", "sim2_sweep.json"],
    )
    def test_bundled_preset_configs_parse(self, name):
        cfg = json.loads((CONFIG_DIR / name).read_text())
        jobs, seed = _preset_jobs(cfg)
        assert jobs and seed == 20240817
        for _, cells, scenarios, n_grid, replicates, truths, _ in jobs:
            assert cells and scenarios and n_grid and replicates >= 25
            assert set(truths) >= {c.label for c in cells}


class TestReport:
    def make_result(self, path, theta, se, estimator="tmle"):
        payload = {"results": [{
            "estimator": estimator, "theta_hat": theta, "se": se,
            "ci_low": None if se is None else theta - 1.96 * se,
            "ci_high": None if se is None else theta + 1.96 * se,
            "n": 100, "n_conditioning": 40, "diagnostics": {},
        }]}
        path.write_text(json.dumps(payload))
        return str(path)

    def test_ratio_of_identical_results_is_one(self, tmp_path, capsys):
        res = self.make_result(tmp_path / "a.json", 0.3, 0.01)
        assert main(["report", "--a", res, "--b", res]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["ratio"] == 1.0
        assert payload["se"] == pytest.approx(math.sqrt(2.0) * 0.01 / 0.3, abs=1e-12)
        assert payload["ci_low"] < 1.0 < payload["ci_high"]

    def test_ratio_matches_delta_method(self, tmp_path, capsys):
        a = self.make_result(tmp_path / "a.json", 0.3, 0.01)
        b = self.make_result(tmp_path / "b.json", 0.2, 0.02)
        assert main(["report", "--a", a, "--b", b, "--out", str(tmp_path / "r.json")]) == 0
        payload = json.loads((tmp_path / "r.json").read_text())
        assert payload["ratio"] == pytest.approx(1.5, abs=1e-12)
        want = 1.5 * math.hypot(0.01 / 0.3, 0.02 / 0.2)
        assert payload["se"] == pytest.approx(want, abs=1e-12)

    def test_rows_without_se_report_none(self, tmp_path, capsys):
        a = self.make_result(tmp_path / "a.json", 0.3, None, estimator="sub")
        b = self.make_result(tmp_path / "b.json", 0.2, None, estimator="sub")
        assert main(["report", "--a", a, "--b", b, "--estimator", "sub"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["se"] is None
        assert "ci_low" not in payload

    def test_missing_estimator_row(self, tmp_path, capsys):
        a = self.make_result(tmp_path / "a.json", 0.3, 0.01)
        expect_error(
            capsys, ["report", "--a", a, "--b", a, "--estimator", "ipw"], 2, "no 'ipw' result"
        )
