import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rbmlab.errors import ValidationError
from rbmlab.experiments import (ExperimentConfig, load_config, parse_config,
                                run_experiment, sweep)

SMALL_AMP_CONFIG = """
[experiment]
kind = amp_vs_se
seeds = 0,1

[model]
alpha = 2.0
lambdas = 1.4
k = 1
d = 400

[algorithm]
max_iters = 40
init_overlap = 0.3
"""

GORDON_CONFIG = """
[experiment]
kind = gordon_rank1
seeds = 0

[model]
alpha = 2.0
lambdas = 1.4
k = 1
d = 100

[algorithm]
gh_nodes = 400
"""


def test_parse_round_trip():
    cfg = parse_config(SMALL_AMP_CONFIG)
    assert cfg.kind == "amp_vs_se"
    assert cfg.seeds == (0, 1)
    assert cfg.model["d"] == 400
    assert cfg.algorithm["max_iters"] == 40
    assert cfg.algorithm["damping"] == 0.7  # default fills in


def test_unknown_key_rejected():
    with pytest.raises(ValidationError):
        parse_config(SMALL_AMP_CONFIG + "\nbogus_key = 1\n")


def test_unknown_section_rejected():
    with pytest.raises(ValidationError):
        parse_config(SMALL_AMP_CONFIG + "\n[mystery]\nx = 1\n")


def test_unknown_kind_rejected():
    with pytest.raises(ValidationError):
        parse_config(SMALL_AMP_CONFIG.replace("amp_vs_se", "nonsense"))


def test_empty_seeds_rejected():
    with pytest.raises(ValidationError):
        parse_config(SMALL_AMP_CONFIG.replace("seeds = 0,1", "seeds = "))


def test_amp_vs_se_bundle(tmp_path):
    cfg = parse_config(SMALL_AMP_CONFIG)
    summary = run_experiment(cfg, str(tmp_path), quiet=True)
    assert set(summary["per_seed"]) == {"0", "1"}
    assert "max_gap" in summary["median"]
    assert os.path.exists(tmp_path / "summary.json")
    assert os.path.exists(tmp_path / "amp_vs_se_seed0.csv")
    with open(tmp_path / "summary.json") as f:
        blob = json.load(f)
    assert blob["config_hash"] == cfg.content_hash()


def test_csv_bodies_reproducible(tmp_path):
    cfg = parse_config(SMALL_AMP_CONFIG)
    run_experiment(cfg, str(tmp_path / "a"), quiet=True)
    run_experiment(cfg, str(tmp_path / "b"), quiet=True)
    for seed in (0, 1):
        fa = (tmp_path / "a" / f"amp_vs_se_seed{seed}.csv").read_bytes()
        fb = (tmp_path / "b" / f"amp_vs_se_seed{seed}.csv").read_bytes()
        assert fa == fb


def test_thread_count_does_not_change_output(tmp_path):
    cfg = parse_config(SMALL_AMP_CONFIG)
    run_experiment(cfg, str(tmp_path / "t1"), threads=1, quiet=True)
    run_experiment(cfg, str(tmp_path / "t2"), threads=2, quiet=True)
    for seed in (0, 1):
        fa = (tmp_path / "t1" / f"amp_vs_se_seed{seed}.csv").read_bytes()
        fb = (tmp_path / "t2" / f"amp_vs_se_seed{seed}.csv").read_bytes()
        assert fa == fb


def test_sweep_row_count_contract(tmp_path):
    cfg = parse_config(GORDON_CONFIG)
    out = sweep(cfg, "lambda", [1.3, 1.5, 1.8], str(tmp_path), quiet=True)
    body = (tmp_path / "sweep_lambda.csv").read_text().strip().splitlines()
    header, rows = body[0], body[1:]
    # one row per (value, seed, numeric metric)
    n_metrics = len(set(r.split(",")[2] for r in rows))
    assert len(rows) == 3 * 1 * n_metrics
    assert out["rows"] == len(rows)


def test_sweep_duplicate_values_rejected(tmp_path):
    cfg = parse_config(GORDON_CONFIG)
    with pytest.raises(ValidationError):
        sweep(cfg, "lambda", [1.4, 1.4], str(tmp_path), quiet=True)


def test_sweep_bad_axis_rejected(tmp_path):
    cfg = parse_config(GORDON_CONFIG)
    with pytest.raises(ValidationError):
        sweep(cfg, "seeds", [1.0], str(tmp_path), quiet=True)


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL_AMP_CONFIG + "\nbogus = 3\n")
    proc = subprocess.run(
        [sys.executable, "-m", "rbmlab.cli", "amp", "--config", str(bad),
         "--out", str(tmp_path / "out")],
        capture_output=True, text=True)
    assert proc.returncode == 2
    assert "validation error" in proc.stderr


def test_cli_runs_small_experiment(tmp_path):
    cfg_path = tmp_path / "cfg.ini"
    cfg_path.write_text(SMALL_AMP_CONFIG)
    proc = subprocess.run(
        [sys.executable, "-m", "rbmlab.cli", "amp", "--config", str(cfg_path),
         "--seed", "0", "--out", str(tmp_path / "out"), "--quiet"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert os.path.exists(tmp_path / "out" / "summary.json")


def test_cli_generate(tmp_path):
    cfg_path = tmp_path / "cfg.ini"
    cfg_path.write_text(SMALL_AMP_CONFIG)
    proc = subprocess.run(
        [sys.executable, "-m", "rbmlab.cli", "generate", "--config", str(cfg_path),
         "--seed", "0", "--out", str(tmp_path / "data"), "--quiet"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    from rbmlab.spiked_data import load_dataset
    data = load_dataset(str(tmp_path / "data" / "dataset_seed0.spkd"))
    assert data.d == 400 and data.seed == 0


def test_failure_marker_written(tmp_path):
    # a capacity error mid-run leaves a FAILED marker beside partial outputs
    broken = SMALL_AMP_CONFIG.replace("d = 400", "d = 40000")
    cfg = parse_config(broken)
    from rbmlab.errors import CapacityError
    with pytest.raises(CapacityError):
        run_experiment(cfg, str(tmp_path), quiet=True)
    assert os.path.exists(tmp_path / "FAILED")
