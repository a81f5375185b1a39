import json
import os

import numpy as np
import pandas as pd
import pytest

from utils.config import ConfigDocument, Settings, load_config
from utils.errors import (
    EXIT_CONFIG_ERROR,
    EXIT_NUMERICAL_ERROR,
    ConfigError,
    DomainError,
    NumericalError,
    SeparationError,
    exit_code_for,
)
from utils.session import TOOL_VERSION, RunManifest, RunSession
from utils.storage import load_array, load_json, load_table, save_array, save_json, save_table


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "K": 2,\n  "tau": ,\n}\n')
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    assert info.value.line == 3
    assert str(path) in str(info.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.json"))


def test_semantic_error_names_the_key_line(write_config):
    doc = load_config(write_config({"K": 2, "f_c": 20, "tau": -0.5}))
    with pytest.raises(ConfigError) as info:
        doc.require_positive("tau")
    assert info.value.line == 4
    assert "'tau'" in str(info.value)


def test_require_int_and_defaults():
    doc = ConfigDocument.from_dict({"K": 2, "trials": 1.5})
    assert doc.require_int("K") == 2
    assert doc.require_int("missing", 7) == 7
    with pytest.raises(ConfigError):
        doc.require_int("trials")
    with pytest.raises(ConfigError):
        doc.require_int("K", minimum=3)
    with pytest.raises(ConfigError):
        doc.require("nothing")


def test_override_ignores_none():
    doc = ConfigDocument.from_dict({"seed": 1, "n_trials": 10})
    merged = doc.override(seed=None, n_trials=3)
    assert merged.get("seed") == 1
    assert merged.get("n_trials") == 3


def test_top_level_must_be_object():
    with pytest.raises(ConfigError):
        ConfigDocument([1, 2, 3])


def test_settings_from_env(monkeypatch):
    monkeypatch.setenv("DYNSPIKE_THREADS", "3")
    monkeypatch.setenv("DYNSPIKE_OUTPUT_DIR", "elsewhere")
    monkeypatch.setenv("DYNSPIKE_SEED", "42")
    settings = Settings.from_env()
    assert (settings.threads, settings.output_dir, settings.seed) == (3, "elsewhere", 42)


@pytest.mark.parametrize("error, code", [
    (ConfigError("x"), EXIT_CONFIG_ERROR),
    (DomainError("x"), EXIT_CONFIG_ERROR),
    (NumericalError("x"), EXIT_NUMERICAL_ERROR),
    (SeparationError("x", 0.001, 1e12), EXIT_NUMERICAL_ERROR),
])
def test_exit_codes(error, code):
    assert exit_code_for(error) == code


def test_errors_keep_builtin_bases():
    assert isinstance(ConfigError("x"), ValueError)
    assert isinstance(NumericalError("x"), RuntimeError)


def test_manifest_lists_outputs_and_itself(tmp_path):
    session = RunSession("simulate", str(tmp_path / "run"))
    out = save_json({"a": 1}, session.path("a.json"), session)
    session.record_timing("simulate", 0.5)
    manifest = RunManifest(session, {"seed": 3}, 3)
    manifest.status = "success"
    path = manifest.write()
    data = load_json(path)
    assert data["outputs"] == [out, path]
    assert data["tool_version"] == TOOL_VERSION
    assert data["timings"]["simulate"] == 0.5
    assert data["status"] == "success"


def test_manifest_records_errors(tmp_path):
    session = RunSession("certify", str(tmp_path))
    session.add_error(SeparationError("too close"))
    manifest = RunManifest(session)
    manifest.status = "failed"
    data = load_json(manifest.write())
    assert data["errors"][0]["type"] == "SeparationError"


def test_array_round_trip_with_header(tmp_path):
    frames = np.arange(24, dtype=float).reshape(2, 3, 4)
    path = save_array(frames, str(tmp_path / "frames.npz"), {"K": 1, "tau": 0.5})
    array, header = load_array(path)
    assert np.array_equal(array, frames)
    assert header == {"K": 1, "tau": 0.5}
    assert os.path.exists(tmp_path / "frames.json")


def test_table_round_trip(tmp_path):
    table = pd.DataFrame({"bin_lo": [0.0, 0.25], "n": [3, 0], "rate_dynamic": [1.0, np.nan]})
    again = load_table(save_table(table, str(tmp_path / "t.csv")))
    assert list(again.columns) == ["bin_lo", "n", "rate_dynamic"]
    assert np.isnan(again.loc[1, "rate_dynamic"])


def test_save_json_is_stable(tmp_path):
    path = str(tmp_path / "x.json")
    save_json({"b": 1, "a": [1, 2]}, path)
    first = open(path).read()
    save_json({"b": 1, "a": [1, 2]}, path)
    assert open(path).read() == first
    assert json.loads(first) == {"b": 1, "a": [1, 2]}
