"""CLI and experiment-config tests: exit codes, artifacts, determinism."""

import csv
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from driftfit import cli
from driftfit.config import ConfigError, preset, resolve_config
from driftfit.prob_flow import AnalyticForce


def tiny_config(out_dir, seed=3, **inference_overrides):
    inference = {"epochs": 5, "hidden": [8], "max_points": 40, "lr": 1e-2}
    inference.update(inference_overrides)
    return {
        "name": "tiny",
        "seed": seed,
        "out_dir": str(out_dir),
        "system": {
            "kind": "ou",
            "omega": [[1.0, 0.0], [0.0, 1.0]],
            "d_mat": [[1.0, 0.0], [0.0, 1.0]],
        },
        "simulation": {
            "n_paths": 60,
            "dt": 0.05,
            "record_times": [0.0, 0.25, 0.5],
            "x0": {"kind": "gaussian", "mean": [0.0, 0.0], "cov_diag": [4.0, 1.0]},
        },
        "score": {"hidden": [8], "epochs": 10},
        "inference": inference,
    }


def write_config(tmp_path, cfg, name="config_in.json"):
    path = tmp_path / name
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One completed run-all of the tiny experiment, shared across tests."""
    root = tmp_path_factory.mktemp("tiny")
    out = root / "run"
    cfg = tiny_config(out)
    path = write_config(root, cfg)
    assert cli.main(["run-all", "--config", path]) == 0
    return {"out": out, "config_path": path, "raw": cfg}


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def test_presets_resolve():
    for name in ("ou2", "ou6", "ou2-trap", "schlogl"):
        cfg = resolve_config({"preset": name})
        assert cfg["name"] == name
        assert cfg["simulation"]["record_times"]
        # lossless serialization round trip
        assert json.loads(json.dumps(cfg)) == cfg


def test_resolve_is_idempotent_on_echo():
    cfg = resolve_config({"preset": "ou6", "seed": 9})
    assert resolve_config(cfg) == cfg
    # generated benchmark matrices are materialized and seed-keyed
    assert np.asarray(cfg["system"]["omega"]).shape == (6, 6)
    assert cfg != resolve_config({"preset": "ou6", "seed": 10})


def test_unknown_preset_and_fields_rejected():
    with pytest.raises(ConfigError):
        preset("nope")
    with pytest.raises(ConfigError, match="inference.typo"):
        resolve_config({"preset": "ou2", "inference": {"typo": 1}})
    with pytest.raises(ConfigError, match="record_times"):
        resolve_config({"preset": "ou2", "simulation": {"record_times": [0.0, 0.05]}, "simulation": {"record_times": [0.2, 0.1]}})
    with pytest.raises(ConfigError, match="n_paths"):
        resolve_config({"preset": "ou2", "simulation": {"n_paths": 1}})
    with pytest.raises(ConfigError, match="gamma"):
        resolve_config({"preset": "ou2", "inference": {"gamma": [1.0]}})
    with pytest.raises(ConfigError, match="noise_mode"):
        resolve_config({"preset": "ou2", "inference": {"noise_mode": "joint-cle"}})


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------


def test_no_experiment_given_is_exit_2(capsys):
    assert cli.main(["simulate"]) == 2
    assert "error" in capsys.readouterr().err


def test_invalid_config_file_is_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["simulate", "--config", str(bad)]) == 2
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    cfg = tiny_config(tmp_path / "o")
    cfg["simulation"]["dt"] = -1.0
    assert cli.main(["simulate", "--config", write_config(tmp_path, cfg)]) == 2
    err = capsys.readouterr().err
    assert "dt" in err


def test_missing_dataset_is_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path, tiny_config(tmp_path / "empty"))
    assert cli.main(["train-score", "--config", cfg]) == 2
    assert cli.main(["infer", "--config", cfg]) == 2
    assert cli.main(["eval", "--config", cfg]) == 2
    assert "not found" in capsys.readouterr().err


def test_lock_file_rejects_concurrent_writer(tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    cfg = write_config(tmp_path, tiny_config(out))
    assert cli.main(["simulate", "--config", cfg]) == 2
    assert "locked" in capsys.readouterr().err
    (out / ".lock").unlink()
    assert cli.main(["simulate", "--config", cfg]) == 0
    assert not (out / ".lock").exists()  # released on success


def test_fingerprint_mismatch_is_exit_2(tmp_path, tiny_run, capsys):
    out = tmp_path / "mismatch"
    shutil.copytree(tiny_run["out"], out)
    (out / ".lock").unlink(missing_ok=True)
    # re-simulate with another seed: dataset changes under the old checkpoint
    cfg = tiny_config(out, seed=99)
    path = write_config(tmp_path, cfg)
    assert cli.main(["simulate", "--config", path]) == 0
    assert cli.main(["infer", "--config", path]) == 2
    assert "fingerprint" in capsys.readouterr().err


def test_module_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "driftfit", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "run-all" in proc.stdout


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def strict_rows(path):
    """Parse a CSV with one leading comment line; all rows must be rectangular."""
    with open(path) as fh:
        first = fh.readline()
        assert first.startswith("# ")
        rows = list(csv.reader(fh))
    width = len(rows[0])
    assert all(len(r) == width for r in rows)
    return rows


def test_run_all_artifacts(tiny_run):
    out = tiny_run["out"]
    for rel in ("config.json", "dataset/meta.json", "score.json", "score_meta.json",
                "score_report.json", "results/force_model.json", "results/report.json",
                "eval/metrics.json"):
        assert (out / rel).exists(), rel

    with open(out / "config.json") as fh:
        echo = json.load(fh)
    # the echoed config is fully resolved: replaying it resolves to itself
    assert resolve_config(echo) == echo
    assert echo["inference"]["epochs"] == 5
    assert echo["score"]["lr"] == pytest.approx(3e-3)  # default made explicit

    with open(out / "eval/metrics.json") as fh:
        metrics = json.load(fh)
    assert metrics["mode"] == "known-D"
    assert metrics["rmse"] >= 0.0
    assert "omega_rel_error" in metrics
    assert metrics["config"] == echo

    rows = strict_rows(out / "eval/rmse_vs_time.csv")
    assert rows[0] == ["time", "rmse", "in_horizon"]
    assert len(rows) == 1 + 3  # header + one row per snapshot
    rows = strict_rows(out / "eval/field_comparison.csv")
    assert rows[0] == ["x1", "x2", "f_true1", "f_true2", "f_inferred1", "f_inferred2"]
    rows = strict_rows(out / "eval/rmse_vs_dt.csv")
    assert rows[0] == ["dt_snap", "seed", "rmse"]


def test_run_all_is_bitwise_deterministic(tmp_path):
    out = tmp_path / "rerun"
    path = write_config(tmp_path, tiny_config(out))
    rels = ("eval/metrics.json", "dataset/snapshot_1.csv", "eval/rmse_vs_time.csv")
    assert cli.main(["run-all", "--config", path]) == 0
    first = {rel: (out / rel).read_bytes() for rel in rels}
    shutil.rmtree(out)
    assert cli.main(["run-all", "--config", path]) == 0
    for rel in rels:
        assert (out / rel).read_bytes() == first[rel], rel


def test_zero_noise_mode_flag(tmp_path, tiny_run):
    out = tmp_path / "zero"
    shutil.copytree(tiny_run["out"], out)
    (out / ".lock").unlink(missing_ok=True)
    cfg = tiny_config(out)
    path = write_config(tmp_path, cfg)
    assert cli.main(["infer", "--config", path, "--noise-mode", "zero"]) == 0
    with open(out / "results/report.json") as fh:
        assert json.load(fh)["mode"] == "zero-D"
    assert cli.main(["eval", "--config", path, "--noise-mode", "zero"]) == 0


def test_holdout_last_flag(tmp_path):
    out = tmp_path / "holdout"
    cfg = tiny_config(out)
    path = write_config(tmp_path, cfg)
    args = ["--config", path, "--holdout-last"]
    assert cli.main(["run-all"] + args) == 0
    rows = strict_rows(out / "eval/rmse_vs_time.csv")[1:]
    assert [r[2] for r in rows] == ["1", "1", "0"]  # trained on 2 of 3 snapshots
    with open(out / "eval/metrics.json") as fh:
        assert json.load(fh)["training_horizon"] == 0.25


def test_eval_perfect_recovery_reports_zero_rmse(tmp_path, tiny_run, monkeypatch):
    out = tmp_path / "perfect"
    shutil.copytree(tiny_run["out"], out)
    (out / ".lock").unlink(missing_ok=True)
    truth = AnalyticForce(
        lambda x: -np.atleast_2d(x),
        jacobian_fn=lambda x: np.broadcast_to(-np.eye(2), (len(np.atleast_2d(x)), 2, 2)),
    )
    monkeypatch.setattr(cli, "load_force_model", lambda path: truth)
    cfg = tiny_config(out)
    assert cli.main(["eval", "--config", write_config(tmp_path, cfg)]) == 0
    rows = strict_rows(out / "eval/rmse_vs_time.csv")[1:]
    assert all(float(r[1]) == 0.0 for r in rows)
    with open(out / "eval/metrics.json") as fh:
        metrics = json.load(fh)
    assert metrics["rmse"] == 0.0
    assert metrics["omega_rel_error"] == 0.0
