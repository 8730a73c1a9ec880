"""Test the experiment pipeline, run directories and the command-line harness."""

import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

import cli
from calculators.am import init_am_state, run_am
from calculators.errors import ContractViolation
from calculators.phantom import TransmissionData
from calculators.projector import SystemMatrix
from config.run_config import parse_run_config, render_run_config
from services.experiment import compare_run_dirs, compare_runs, run_directory, run_experiment, simulate_only
from utils.formats import read_convergence_csv, read_raw_image, read_tree_manifest

SMALL = """
[geometry]
nx = 16
ny = 16
beam = parallel
n_views = 8
n_detectors = 24

[simulation]
i0 = 10000
seed = 3

[solver]
algorithm = both
am_iterations = 5
wam_iterations = 10
depth = 2
expansion_iterations = 4, 8
"""


@pytest.fixture
def small_config():
    return parse_run_config(SMALL)


def test_run_directory_layout(small_config, tmp_path):
    summary = run_experiment(small_config, tmp_path / "run", threads=1)
    run = Path(summary.directory)
    assert run == tmp_path / "run"
    for name in ("config.ini", "summary.json", "truth.raw", "truth.pgm", "truth.json",
                 "am/config.ini", "am/convergence.csv", "am/image.raw", "am/image.pgm",
                 "wam/convergence.csv", "wam/image.raw", "wam/tree_iter0000.txt",
                 "wam/tree_iter0004.txt", "wam/tree_iter0008.txt",
                 "comparison/report.json", "comparison/difference.raw"):
        assert (run / name).exists(), name

    assert parse_run_config((run / "config.ini").read_text()) == small_config
    assert [r.solver for r in summary.runs] == ["am", "wam"]
    assert summary.rays == 8 * 24 and summary.voxels == 256
    wam = summary.runs[1]
    assert wam.expansions == [4, 8]
    assert wam.iterations == 10

    log = read_convergence_csv(run / "wam" / "convergence.csv")
    assert log["iter"].tolist() == list(range(11))
    assert log["active_set"].iloc[-1] == wam.active_set
    tree, iteration = read_tree_manifest(run / "wam" / "tree_iter0008.txt")
    assert iteration == 8
    assert tree.size == log["active_set"].iloc[-1]

    assert read_raw_image(run / "wam" / "image.raw").min() >= 0.0
    report = json.loads((run / "comparison" / "report.json").read_text())
    assert report["target_objective"] == min(summary.runs[0].final_objective, wam.final_objective)
    assert json.loads((run / "summary.json").read_text())["seed"] == 3


def test_identical_seed_gives_identical_logs(small_config, tmp_path):
    first = run_experiment(small_config, tmp_path / "first", threads=1)
    second = run_experiment(small_config, tmp_path / "second", threads=2)
    for solver in ("am", "wam"):
        a = read_convergence_csv(Path(first.directory) / solver / "convergence.csv")
        b = read_convergence_csv(Path(second.directory) / solver / "convergence.csv")
        pd.testing.assert_frame_equal(a.drop(columns="elapsed_s"), b.drop(columns="elapsed_s"))


def test_zero_phantom_noiseless_has_zero_objective(tmp_path):
    config = parse_run_config(
        "[geometry]\nnx = 8\nny = 8\nbeam = parallel\nn_views = 4\nn_detectors = 12\n\n"
        "[phantom]\npreset = none\n\n[simulation]\nnoise = false\n\n"
        "[solver]\nalgorithm = am\nam_iterations = 3\n"
    )
    summary = run_experiment(config, tmp_path / "zero", threads=1)
    log = read_convergence_csv(Path(summary.directory) / "am" / "convergence.csv")
    assert (log["objective"] == 0.0).all()
    assert not (Path(summary.directory) / "wam").exists()
    assert summary.comparison is None


def test_compare_run_against_itself(small_config, tmp_path):
    run = Path(run_experiment(small_config, tmp_path / "run", threads=1).directory)
    report = compare_run_dirs(run / "am", run / "am", tmp_path / "self")
    assert report.difference_max_abs == 0.0
    assert report.crossing_a == report.crossing_b
    assert report.crossing_a.iter == 5
    assert report.rmse_a == report.rmse_b is not None
    assert not read_raw_image(tmp_path / "self" / "difference.raw").any()


def test_compare_rejects_mismatched_runs(tmp_path):
    log = pd.DataFrame({"iter": [0], "objective": [1.0], "elapsed_s": [0.0], "active_set": [16], "cum_updates": [0]})
    with pytest.raises(ContractViolation):
        compare_runs(log, log, np.zeros((1, 4, 4)), np.zeros((1, 8, 8)))
    with pytest.raises(ContractViolation):
        compare_run_dirs(tmp_path / "missing_a", tmp_path / "missing_b")


def test_crossing_absent_when_target_never_reached():
    log_a = pd.DataFrame({"iter": [0, 1], "objective": [10.0, 5.0], "elapsed_s": [0.0, 0.1],
                          "active_set": [4, 4], "cum_updates": [0, 4]})
    log_b = pd.DataFrame({"iter": [0, 1], "objective": [10.0, 7.0], "elapsed_s": [0.0, 0.1],
                          "active_set": [16, 16], "cum_updates": [0, 16]})
    report, _ = compare_runs(log_a, log_b, np.zeros((1, 4, 4)), np.ones((1, 4, 4)))
    assert report.target_objective == 5.0
    assert report.crossing_a.iter == 1 and report.crossing_a.cum_updates == 4
    assert report.crossing_b.iter is None
    assert report.difference_max_abs == 1.0


def test_simulate_only(small_config, tmp_path):
    summary = simulate_only(small_config, tmp_path / "sim", threads=1)
    directory = Path(summary.directory)
    counts = read_raw_image(directory / "counts.raw")
    incident = read_raw_image(directory / "incident.raw")
    assert counts.shape == incident.shape == (1, 8, 24)
    assert (incident == 1e4).all()
    assert np.all(counts == np.rint(counts)) and counts.min() >= 0
    assert (directory / "truth.raw").exists()
    assert summary.runs == []


def test_default_run_directory_is_config_digest(small_config):
    first = run_directory(small_config)
    assert first.name.startswith("run-")
    assert run_directory(parse_run_config(render_run_config(small_config))) == first
    assert run_directory(small_config, "elsewhere") == Path("elsewhere")


def test_cli_exit_codes(tmp_path, capsys):
    config_path = tmp_path / "small.ini"
    config_path.write_text(SMALL)
    assert cli.main(["run", str(config_path), "--out", str(tmp_path / "out"), "--threads", "1",
                     "--seed", "9"]) == cli.EXIT_OK
    assert "Results written to" in capsys.readouterr().out
    assert parse_run_config((tmp_path / "out" / "config.ini").read_text()).simulation.seed == 9

    assert cli.main(["compare", str(tmp_path / "out" / "am"), str(tmp_path / "out" / "wam"),
                     "--out", str(tmp_path / "cmp")]) == cli.EXIT_OK
    assert (tmp_path / "cmp" / "report.json").exists()

    bad = tmp_path / "bad.ini"
    bad.write_text("[solver]\ndepth = deep\n")
    assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err
    assert cli.main(["compare", str(tmp_path / "nope"), str(tmp_path / "out" / "am")]) == cli.EXIT_CONFIG


def test_cli_numerical_failure_exit_code(tmp_path, capsys, monkeypatch):
    def underflowing_run(config, out_dir=None, threads=None):
        H = SystemMatrix.from_dense([[1.0], [1.0]])
        data = TransmissionData([0.0, 1e-10], [1e-315, 1.0])
        run_am(init_am_state(H, data), H, data, 3)

    monkeypatch.setattr(cli, "run_experiment", underflowing_run)
    config_path = tmp_path / "small.ini"
    config_path.write_text(SMALL)
    assert cli.main(["run", str(config_path), "--out", str(tmp_path / "out")]) == cli.EXIT_NUMERICAL
    assert "numerical failure: solver am, iteration 1" in capsys.readouterr().err
