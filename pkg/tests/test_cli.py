import json
import os

import numpy as np
import pytest

from main import build_parser, main
from utils.errors import EXIT_CONFIG_ERROR, EXIT_NUMERICAL_ERROR, EXIT_OK
from utils.storage import load_json, load_table

PAIR = {"particles": [{"x": [0.3], "v": [0.1], "w": 1.0}, {"x": [0.7], "v": [-0.15], "w": 0.9}]}


def _run(*argv):
    return main(list(argv) + ["--threads", "1"])


def _stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def simulated(tmp_path, write_config):
    """Noiseless Fourier measurements of a moving pair (f_c = 20, K = 2, tau = 0.5)"""
    config = write_config({"mode": "fourier", "f_c": 20, "K": 2, "tau": 0.5, "configuration": PAIR}, "sim.json")
    out = tmp_path / "sim"
    assert _run("simulate", "--config", config, "--out", str(out)) == EXIT_OK
    return out


def test_parser_knows_every_command():
    parser = build_parser()
    for command in ("simulate", "reconstruct", "certify", "experiment", "ultrasound"):
        args = parser.parse_args([command, "--seed", "3"])
        assert args.command == command and args.seed == 3
    assert parser.parse_args(["experiment", "--trials", "5"]).trials == 5


def test_simulate_writes_measurements_truth_and_manifest(simulated):
    data = load_json(str(simulated / "measurements.json"))
    assert (data["f_c"], data["K"], data["tau"]) == (20, 2, 0.5)
    assert len(data["values"]) == 5 * 41
    truth = load_json(str(simulated / "truth.json"))
    assert len(truth["particles"]) == 2
    manifest = load_json(str(simulated / "manifest.json"))
    assert manifest["status"] == "success"
    assert manifest["command"] == "simulate"
    assert {os.path.basename(p) for p in manifest["outputs"]} == {"measurements.json", "truth.json", "manifest.json"}


def test_simulate_is_deterministic_per_seed(tmp_path, write_config):
    config = write_config({"f_c": 10, "K": 1, "tau": 0.5, "noise": {"alpha": 0.1}})
    outputs = []
    for name in ("a", "b"):
        assert _run("simulate", "--config", config, "--seed", "11", "--out", str(tmp_path / name)) == EXIT_OK
        outputs.append((tmp_path / name / "measurements.json").read_bytes())
    assert outputs[0] == outputs[1]


def test_simulate_psf_writes_frame_stack(tmp_path, write_config):
    config = write_config({"mode": "psf", "K": 1, "tau": 0.5,
                           "configuration": {"particles": [{"x": [0.5, 0.5], "v": [0.0, 0.1]}]}})
    assert _run("simulate", "--config", config, "--out", str(tmp_path)) == EXIT_OK
    with np.load(tmp_path / "frames.npz") as archive:
        assert archive["data"].shape == (3, 25, 25)
    assert load_json(str(tmp_path / "frames.json"))["K"] == 1


def test_nonpositive_tau_is_a_config_error(tmp_path, write_config, capsys):
    config = write_config({"f_c": 20, "K": 2, "tau": 0})
    assert _run("simulate", "--config", config, "--out", str(tmp_path / "run")) == EXIT_CONFIG_ERROR
    error = _stderr_json(capsys)
    assert error["type"] == "ConfigError"
    assert error["exit_code"] == EXIT_CONFIG_ERROR
    assert "tau" in error["error"]
    # the manifest is written even for failed runs
    assert load_json(str(tmp_path / "run" / "manifest.json"))["status"] == "failed"


def test_reconstruct_recovers_simulated_pair(tmp_path, simulated, write_config):
    config = write_config({"measurements": str(simulated / "measurements.json"),
                           "solver": {"tv_bound": 1.9}}, "rec.json")
    assert _run("reconstruct", "--config", config, "--out", str(tmp_path / "rec")) == EXIT_OK
    recon = load_json(str(tmp_path / "rec" / "reconstruction.json"))
    assert len(recon["particles"]) == 2
    positions = sorted(p["x"][0] for p in recon["particles"])
    assert positions == pytest.approx([0.3, 0.7], abs=1e-5)


def test_reconstruct_zero_measurements(tmp_path, write_config):
    zeros = {"f_c": 5, "K": 1, "tau": 0.5, "values": [[0.0, 0.0]] * (3 * 11)}
    measurements = tmp_path / "zeros.json"
    measurements.write_text(json.dumps(zeros))
    config = write_config({"measurements": str(measurements), "solver": {"tv_bound": 2.0}}, "rec.json")
    assert _run("reconstruct", "--config", config, "--out", str(tmp_path / "rec")) == EXIT_OK
    assert load_json(str(tmp_path / "rec" / "reconstruction.json"))["particles"] == []


def test_reconstruct_header_mismatch_exits_2(tmp_path, simulated, write_config, capsys):
    config = write_config({"measurements": str(simulated / "measurements.json"), "f_c": 21,
                           "solver": {"tv_bound": 1.9}}, "rec.json")
    assert _run("reconstruct", "--config", config, "--out", str(tmp_path / "rec")) == EXIT_CONFIG_ERROR
    assert "f_c" in _stderr_json(capsys)["error"]


def test_reconstruct_needs_tv_bound(tmp_path, simulated, write_config):
    config = write_config({"measurements": str(simulated / "measurements.json")}, "rec.json")
    assert _run("reconstruct", "--config", config, "--out", str(tmp_path / "rec")) == EXIT_CONFIG_ERROR


def test_certify_static_average_reports_ghosts(tmp_path, write_config):
    config = write_config({"f_c": 128, "K": 1, "tau": 0.5, "construction": "static_average"})
    assert _run("certify", "--config", config, "--out", str(tmp_path)) == EXIT_OK
    report = load_json(str(tmp_path / "verification.json"))
    assert report["interpolation_ok"]
    assert not report["passed"]
    assert {v["label"] for v in report["violations"]} == {"ghost"}


def test_certify_perturbed_passes(tmp_path, write_config):
    config = write_config({"f_c": 128, "K": 1, "tau": 0.5, "construction": "perturbed",
                           "epsilon": 0.08, "margin": 0.01})
    assert _run("certify", "--config", config, "--out", str(tmp_path)) == EXIT_OK
    report = load_json(str(tmp_path / "verification.json"))
    assert report["passed"]
    assert report["epsilon"] == pytest.approx(0.08)
    assert os.path.exists(tmp_path / "certificate.json")


def test_certify_close_nodes_exit_3(tmp_path, write_config, capsys):
    config = write_config({"f_c": 128, "K": 1, "tau": 0.5, "spacing": 0.5 / 128})
    assert _run("certify", "--config", config, "--out", str(tmp_path)) == EXIT_NUMERICAL_ERROR
    error = _stderr_json(capsys)
    assert error["type"] == "SeparationError"
    assert error["exit_code"] == EXIT_NUMERICAL_ERROR


def test_experiment_smoke_run(tmp_path, write_config):
    config = write_config({"trial": {"n_min": 2, "n_max": 2, "f_c": 10}, "betas": [0.01]})
    assert _run("experiment", "--config", config, "--trials", "2", "--seed", "5", "--out", str(tmp_path)) == EXIT_OK
    table = load_table(str(tmp_path / "campaign.csv"))
    assert len(table) == 20
    assert table["n"].sum() == 2
    assert os.path.exists(tmp_path / "curvature_0p01.csv")
    summary = load_json(str(tmp_path / "summary.json"))
    assert summary["n_trials"] == 2
    assert summary["trial"]["seed"] == 5


def test_experiment_rejects_unknown_trial_keys(tmp_path, write_config, capsys):
    config = write_config({"trial": {"particles": 3}})
    assert _run("experiment", "--config", config, "--out", str(tmp_path)) == EXIT_CONFIG_ERROR
    assert "trial" in _stderr_json(capsys)["error"]


def test_ultrasound_without_bubbles(tmp_path, write_config):
    config = write_config({"process": {"activation_probability": 0.0}, "duration": 0.05})
    assert _run("ultrasound", "--config", config, "--out", str(tmp_path)) == EXIT_OK
    assert load_table(str(tmp_path / "points.csv")).empty
    summary = load_json(str(tmp_path / "summary.json"))
    assert summary["n_bubbles"] == 0
    manifest = load_json(str(tmp_path / "manifest.json"))
    listed = {os.path.basename(p) for p in manifest["outputs"]}
    assert listed == {"points.csv", "bmode.npz", "bmode.json", "phantom.json", "summary.json", "manifest.json"}
