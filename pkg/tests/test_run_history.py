import json

import numpy as np
import pytest

from src.stability_core.run_history import RunHistory


@pytest.fixture
def history(tmp_path):
    return RunHistory(str(tmp_path / "history.json"))


def test_add_and_query(history):
    """Test adding and querying runs"""
    history.add_run("lc", {"a": 1.0, "b": 1.0}, "success", "L_c=3.14159")
    history.add_run("count", {"L": 3.0, "k": 0.2}, "error", "RadiusExhausted")
    assert history.get_last_run()["command"] == "count"
    assert len(history.get_run_history(limit=1)) == 1
    assert [e["command"] for e in history.get_failed_runs()] == ["count"]
    assert [e["command"] for e in history.search_history("LC")] == ["lc"]
    assert [e["command"] for e in history.search_history("3.0")] == ["count"]


def test_persisted_between_instances(history):
    """Test that history survives a reload"""
    history.add_run("simulate", {"n_cells": 50}, "success", "rate=-0.2")
    reloaded = RunHistory(history.history_file)
    assert reloaded.get_last_run()["summary"] == "rate=-0.2"


def test_non_json_arguments_are_stringified(history):
    """Test storage of non-JSON arguments"""
    entry = history.add_run("sweep", {"k_range": (-0.5, 0.5, 3), "grid": np.zeros(2)}, "success", "")
    assert entry["args"]["k_range"] == [-0.5, 0.5, 3]
    assert isinstance(entry["args"]["grid"], str)
    with open(history.history_file) as f:
        assert json.load(f)[0]["command"] == "sweep"


def test_in_memory_history_writes_nothing(tmp_path):
    """Test that an empty path keeps history in memory"""
    history = RunHistory()
    history.add_run("lc", {}, "success", "")
    assert history.get_last_run() is not None
    assert list(tmp_path.iterdir()) == []


def test_clear_history(history):
    """Test clearing history"""
    history.add_run("lc", {}, "success", "")
    history.clear_history()
    assert history.get_last_run() is None
    assert RunHistory(history.history_file).history == []


def test_corrupt_file_is_ignored(tmp_path, mocker):
    """Test loading a corrupt history file"""
    path = tmp_path / "history.json"
    path.write_text("[{")
    warn = mocker.patch("logging.Logger.warning")
    history = RunHistory(str(path))
    assert history.history == []
    warn.assert_called_once()
