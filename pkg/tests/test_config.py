import json
import logging

import pytest
from pydantic import ValidationError

from invtrain.config.logging import configure_logging
from invtrain.config.settings import Settings, get_settings
from invtrain.config.storage import atomic_writer
from invtrain.schemas import ChipSpec, DagDocument, TrainConfig
from invtrain.scripts.write_examples import write_examples


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("INVTRAIN_THREADS", "4")
    monkeypatch.setenv("INVTRAIN_CHECKPOINT", "/tmp/model.bin")
    settings = get_settings()
    assert settings.INVTRAIN_THREADS == 4
    assert settings.INVTRAIN_CHECKPOINT == "/tmp/model.bin"
    assert get_settings() is settings


def test_settings_reject_zero_threads(monkeypatch):
    monkeypatch.setenv("INVTRAIN_THREADS", "0")
    with pytest.raises(ValidationError):
        Settings()


def test_atomic_writer_replaces_on_success(tmp_path):
    path = tmp_path / "nested" / "out.txt"
    with atomic_writer(path) as handle:
        handle.write("first")
    with atomic_writer(path) as handle:
        handle.write("second")
    assert path.read_text() == "second"
    assert [p.name for p in path.parent.iterdir()] == ["out.txt"]


def test_atomic_writer_keeps_old_file_on_failure(tmp_path):
    path = tmp_path / "out.txt"
    path.write_text("old")
    with pytest.raises(RuntimeError):
        with atomic_writer(path) as handle:
            handle.write("partial")
            raise RuntimeError("interrupted")
    assert path.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_configure_logging_with_custom_file(tmp_path, monkeypatch):
    ini = tmp_path / "logging.ini"
    ini.write_text(
        "[loggers]\nkeys = root\n\n[handlers]\nkeys = null\n\n[formatters]\nkeys =\n\n"
        "[logger_root]\nlevel = DEBUG\nhandlers = null\n\n"
        "[handler_null]\nclass = NullHandler\nargs = ()\n"
    )
    monkeypatch.setenv("INVTRAIN_LOG_CONFIG", str(ini))
    configure_logging()
    assert logging.getLogger().level == logging.DEBUG
    monkeypatch.delenv("INVTRAIN_LOG_CONFIG")
    get_settings.cache_clear()
    configure_logging()
    assert logging.getLogger("invtrain").level == logging.INFO


def test_write_examples(tmp_path, capsys):
    written = write_examples(tmp_path)
    assert sorted(p.name for p in written) == ["config.json", "dag.json", "spec.json"]
    ChipSpec.model_validate_json((tmp_path / "spec.json").read_text())
    TrainConfig.model_validate_json((tmp_path / "config.json").read_text())
    document = DagDocument.model_validate(json.loads((tmp_path / "dag.json").read_text()))
    assert {node.name for node in document.nodes} == {"A", "N", "X", "Y"}

    assert write_examples(tmp_path) == []
    assert "already exists" in capsys.readouterr().out
