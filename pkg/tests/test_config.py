"""Tests for runtime-setting precedence, the strict TOML section loader and atomic writes."""

from __future__ import annotations

import tomllib
from pathlib import Path

import pytest

import ranklab._config as cfg_mod
from ranklab._config import Config, configure, dump_toml, get_config, load_toml, take, write_atomic
from ranklab._log import log
from ranklab.exceptions import ConfigError


@pytest.fixture(autouse=True)
def isolate_config(monkeypatch):
    """Clear RANKLAB_* variables and reset the process-global config per test."""
    for name in ("RANKLAB_VERBOSE", "RANKLAB_WORKERS", "RANKLAB_RUN_ROOT"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr(cfg_mod, "_config", Config())
    yield


# ────────────────────────── runtime settings ──────────────────────────


def test_defaults():
    cfg = get_config()
    assert cfg.verbose is True
    assert cfg.workers == 1
    assert cfg.run_root == Path("runs")


def test_env_overrides_defaults(monkeypatch, tmp_path):
    monkeypatch.setenv("RANKLAB_WORKERS", "4")
    monkeypatch.setenv("RANKLAB_VERBOSE", "0")
    monkeypatch.setenv("RANKLAB_RUN_ROOT", str(tmp_path))
    cfg = get_config()
    assert cfg.workers == 4
    assert cfg.verbose is False
    assert cfg.run_root == tmp_path


def test_explicit_beats_env(monkeypatch):
    monkeypatch.setenv("RANKLAB_WORKERS", "4")
    configure(workers=2)
    assert get_config().workers == 2


def test_bad_worker_values(monkeypatch):
    with pytest.raises(ConfigError, match="workers must be >= 1"):
        configure(workers=0)
    monkeypatch.setenv("RANKLAB_WORKERS", "many")
    with pytest.raises(ConfigError, match="must be an integer") as excinfo:
        get_config()
    assert excinfo.value.key == "workers"


def test_log_respects_verbose(capsys):
    log("hello")
    assert capsys.readouterr().err == "[ranklab] hello\n"
    configure(verbose=False)
    log("quiet")
    assert capsys.readouterr().err == ""


# ────────────────────────── TOML ──────────────────────────


DEFAULTS = {"batch_size": 16, "lr_main": 1e-5, "schedule": "constant_warmup",
            "feed_query": False, "scheme": None}


def test_take_merges_and_coerces():
    merged = take({"batch_size": 8, "lr_main": 2}, "training", DEFAULTS)
    assert merged["batch_size"] == 8
    assert merged["lr_main"] == 2.0
    assert isinstance(merged["lr_main"], float)
    assert merged["schedule"] == "constant_warmup"


def test_take_rejects_unknown_keys():
    with pytest.raises(ConfigError, match=r"\[training\] unknown key\(s\): lr") as excinfo:
        take({"lr": 1.0}, "training", DEFAULTS, path="exp.toml")
    assert excinfo.value.key == "training.lr"
    assert excinfo.value.path == "exp.toml"


@pytest.mark.parametrize(("key", "value"), [("batch_size", "16"), ("batch_size", True),
                                            ("feed_query", 1), ("lr_main", "fast")])
def test_take_rejects_wrong_types(key, value):
    with pytest.raises(ConfigError, match=f"{key} must be"):
        take({key: value}, "training", DEFAULTS)


def test_take_accepts_anything_for_none_default():
    assert take({"scheme": "sliding"}, "model", DEFAULTS)["scheme"] == "sliding"


def test_load_toml_errors(tmp_path):
    with pytest.raises(ConfigError, match="config file not found"):
        load_toml(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[training\nbatch_size = 1\n")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_toml(bad)


def test_dump_toml_parses_back():
    data = {"name": "exp", "seeds": [0, 1, 2], "skip": None,
            "training": {"lr_main": 1e-5, "feed_query": True},
            "models": {"maxp": {"kind": "max_p", "aggregator_dim": None}}}
    parsed = tomllib.loads(dump_toml(data))
    assert parsed == {"name": "exp", "seeds": [0, 1, 2],
                      "training": {"lr_main": 1e-5, "feed_query": True},
                      "models": {"maxp": {"kind": "max_p"}}}


def test_dump_toml_escapes_strings():
    text = dump_toml({"path": 'C:\\data\\"x"'})
    assert tomllib.loads(text)["path"] == 'C:\\data\\"x"'


def test_write_atomic_leaves_no_temp_files(tmp_path):
    target = tmp_path / "nested" / "out.txt"
    write_atomic(target, "one")
    write_atomic(target, b"two")
    assert target.read_text() == "two"
    assert [p.name for p in target.parent.iterdir()] == ["out.txt"]
