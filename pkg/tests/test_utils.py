import json
import logging
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from utils import (
    DEFAULT_SETTINGS,
    LOGGER_NAME,
    DatasetParseError,
    InvalidArgumentError,
    RunLogger,
    get_bool_setting,
    get_run_logger,
    get_setting,
    load_config,
    setup_logging,
)


def test_load_config_defaults_when_missing(tmp_path):
    cfg = load_config(str(tmp_path / "absent.yaml"))
    assert cfg["settings"] == DEFAULT_SETTINGS
    cfg["settings"]["fit"]["threads"] = 9
    assert DEFAULT_SETTINGS["fit"]["threads"] == 1


def test_load_config_reads_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("settings:\n  predict:\n    n_cap: 50\n")
    assert get_setting(load_config(str(path)), ["settings", "predict", "n_cap"], None) == 50


def test_get_setting_falls_back_to_builtin_default():
    assert get_setting({"settings": {}}, ["settings", "simulation", "chunk_size"], 1) == 65536
    assert get_setting({}, ["settings", "nothing", "here"], "fallback") == "fallback"


def test_get_bool_setting_strings():
    assert get_bool_setting({"settings": {"x": "yes"}}, ["settings", "x"], False) is True
    assert get_bool_setting({"settings": {"x": "off"}}, ["settings", "x"], True) is False
    assert get_bool_setting({}, ["settings", "missing"], True) is True


def test_setup_logging_level_override():
    logger = setup_logging({"settings": {"logging": {"level": "ERROR"}}}, level="debug")
    assert logger.name == LOGGER_NAME
    assert logger.level == logging.DEBUG
    assert not logger.propagate


def test_run_logger_writes_json_lines(tmp_path):
    path = tmp_path / "runs.jsonl"
    run_log = RunLogger(str(path))
    run_log.log_command("simulate", {"trials": 10}, "out.csv", seed=3)
    run_log.log_failure("fit", ValueError("bad"))
    run_log.close()
    first, second = [json.loads(line) for line in path.read_text().splitlines()]
    assert first["command"] == "simulate"
    assert first["seed"] == 3
    assert second == {**second, "event": "command_failed", "error": "ValueError", "message": "bad"}


def test_get_run_logger_disabled_by_default():
    assert get_run_logger({}) is None


def test_get_run_logger_enabled(tmp_path):
    path = tmp_path / "r.jsonl"
    run_log = get_run_logger({"settings": {"run_log": {"enabled": "true", "file": str(path)}}})
    assert isinstance(run_log, RunLogger)
    run_log.close()


def test_errors():
    err = DatasetParseError("broken", 12)
    assert err.line_number == 12
    assert str(err) == "line 12: broken"
    assert isinstance(InvalidArgumentError("x"), ValueError)
