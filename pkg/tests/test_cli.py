"""CLI: subcommand behavior, file outputs, and exit-code categories."""

import json
import os

import numpy as np
import pytest

from sflsim import cli, data as data_mod


def smoke_config(tmp_path, **overrides):
    raw = {
        "version": 1,
        "mode": "replay",
        "model": "tiny_vgg",
        "devices": 2,
        "rounds": 2,
        "lr": 0.05,
        "batch_size": 8,
        "rho": 2,
        "pretrain_epochs": 1,
        "dataset": {"kind": "blobs", "per_class": 32, "noise_sigma": 0.05},
        "seed": 4,
    }
    raw.update(overrides)
    path = tmp_path / "smoke.json"
    path.write_text(json.dumps(raw))
    return path


def test_run_smoke_writes_metrics(tmp_path, capsys):
    cfg = smoke_config(tmp_path)
    out_dir = tmp_path / "out"
    code = cli.main(["run", "--config", str(cfg), "--out", str(out_dir)])
    assert code == cli.EXIT_OK
    assert (out_dir / "metrics.csv").exists()
    stdout = capsys.readouterr().out
    assert "final test accuracy" in stdout


def test_run_with_diagnostics_writes_both_logs(tmp_path):
    cfg = smoke_config(tmp_path, diagnostics=True, rounds=3)
    out_dir = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out_dir)]) == cli.EXIT_OK
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "diagnostics.csv").exists()
    # diagnose consumes the run's output file unchanged
    code = cli.main(["diagnose", "--log", str(out_dir / "diagnostics.csv"), "--at", "3"])
    assert code == cli.EXIT_OK


def test_run_seed_override_changes_metrics(tmp_path):
    cfg = smoke_config(tmp_path)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(b)]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(c), "--seed", "99"]) == 0
    same = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    diff = (a / "metrics.csv").read_bytes() != (c / "metrics.csv").read_bytes()
    assert same and diff


def test_cost_prints_table_and_writes_csv(tmp_path, capsys):
    csv_path = tmp_path / "cost.csv"
    code = cli.main(["cost", "--model", "vgg11", "--setting", "cifar10-k5",
                     "--csv", str(csv_path)])
    assert code == cli.EXIT_OK
    stdout = capsys.readouterr().out
    # The four training methods plus the cached-round row, with pinned GiB.
    for fragment in ("classic", "split", "local_loss", "replay_tx", "replay_buffer",
                     "3.05467", "1.53184", "0.38158", "1.28282", "0.00000"):
        assert fragment in stdout
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 6  # header + five methods
    assert lines[0].startswith("model,method")


def test_cost_resnet9_fl_row(capsys):
    assert cli.main(["cost", "--model", "resnet9"]) == cli.EXIT_OK
    stdout = capsys.readouterr().out
    assert "0.35960" in stdout


def test_gen_data_roundtrip(tmp_path):
    out_dir = tmp_path / "data"
    code = cli.main(["gen-data", "--out", str(out_dir), "--classes", "2",
                     "--per-class", "10", "--seed", "3"])
    assert code == cli.EXIT_OK
    dataset = data_mod.load_idx(out_dir / "images.idx", out_dir / "labels.idx")
    assert len(dataset.labels) == 20
    assert dataset.images.shape == (20, 1, 16, 16)
    assert set(np.unique(dataset.labels)) == {0, 1}


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == cli.EXIT_OK
    stdout = capsys.readouterr().out
    assert "checks passed" in stdout


def test_unknown_flag_exits_2(capsys):
    assert cli.main(["cost", "--nonsense"]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE


def test_config_errors_exit_3(tmp_path, capsys):
    missing = cli.main(["run", "--config", str(tmp_path / "nope.json")])
    assert missing == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 1, "mode": "warp"}))
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_data_errors_exit_4(tmp_path, capsys):
    cfg = smoke_config(
        tmp_path,
        dataset={"kind": "idx", "images": str(tmp_path / "x.idx"),
                 "labels": str(tmp_path / "y.idx")},
    )
    assert cli.main(["run", "--config", str(cfg)]) == cli.EXIT_DATA
    assert cli.main(["diagnose", "--log", str(tmp_path / "missing.csv")]) == cli.EXIT_DATA


def test_training_errors_exit_5(tmp_path, capsys):
    # Dataset images that do not match the model's input shape surface as a
    # training error once the run starts.
    cfg = smoke_config(
        tmp_path,
        dataset={"kind": "blobs", "per_class": 32, "image_shape": [1, 8, 8]},
    )
    assert cli.main(["run", "--config", str(cfg)]) == cli.EXIT_TRAINING


def test_diagnose_violated_bound_warns_but_exits_zero(tmp_path, capsys):
    log = tmp_path / "diag.csv"
    log.write_text(
        "t,eta,grad_norm_sq,eps_mean,delta_mean,loss,gamma,lhs_running,rhs_running\n"
        "0,0.1,1.0,0.0,0.0,0.7,0.1,,\n"
        "1,0.1,1.0,0.0,0.0,0.6,0.2,0.9,0.5\n"
    )
    assert cli.main(["diagnose", "--log", str(log), "--at", "2"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "WARNING: does not hold" in out
    assert "diagnostic, not an error" in out


def test_diagnose_at_out_of_range_is_data_error(tmp_path):
    cfg = smoke_config(tmp_path, diagnostics=True, rounds=3)
    out_dir = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out_dir)]) == 0
    log = str(out_dir / "diagnostics.csv")
    assert cli.main(["diagnose", "--log", log, "--at", "50"]) == cli.EXIT_DATA


def test_profile_override(tmp_path, capsys):
    cfg = smoke_config(tmp_path)
    out_a, out_b = tmp_path / "wifi", tmp_path / "slow"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out_a)]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(out_b),
                     "--profile", "3g"]) == 0
    import csv as csv_mod

    def latency(path):
        with open(path) as fh:
            return float(list(csv_mod.DictReader(fh))[0]["sim_latency_s"])

    assert latency(out_b / "metrics.csv") > latency(out_a / "metrics.csv")
