import sys
import os
import json
import logging
import pytest
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from utils.config import GridConfig, load_config
from utils.errors import DataError
from utils.logger import RUN_ID, get_logger, set_level
from utils.seeding import STREAMS, substream


def test_defaults_without_file():
    config = load_config(None)
    assert config == GridConfig()
    assert config.inference.damping == 1.0
    assert config.em.rollback is True


def test_file_overrides_sections(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"_comment": "ignored", "nlpca": {"epochs": 10}, "threads": 3}), encoding="utf-8")
    config = load_config(path)
    assert config.nlpca.epochs == 10
    assert config.nlpca.lr == GridConfig().nlpca.lr
    assert config.threads == 3


def test_default_config_file_loads():
    path = os.path.join(os.path.dirname(__file__), '..', 'models', 'default_config.json')
    config = load_config(path)
    assert config.detection.threshold == 0.99
    assert config.benchmark.buses_per_section == 3
    assert config.detection.block_hours == 24


def test_unknown_section_or_key(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"solver": {}}), encoding="utf-8")
    with pytest.raises(DataError, match="solver"):
        load_config(path)
    path.write_text(json.dumps({"nlpca": {"epoch": 1}}), encoding="utf-8")
    with pytest.raises(DataError, match="epoch"):
        load_config(path)
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(DataError):
        load_config(path)


def test_override_ignores_none():
    config = GridConfig()
    assert config.override("detection", threshold=None) is config
    assert config.override("detection", threshold=0.95).detection.threshold == 0.95


def test_logger_carries_run_id(caplog):
    logger = get_logger("ConfigTest")
    with caplog.at_level(logging.INFO, logger="ConfigTest"):
        logger.info("hello")
    assert caplog.records[-1].run_id == RUN_ID


def test_set_level_applies_to_existing_loggers(monkeypatch):
    monkeypatch.setenv("GRIDBP_LOG_LEVEL", "INFO")
    get_logger("LevelTest")
    set_level("debug")
    assert logging.getLogger("LevelTest").level == logging.DEBUG
    set_level("INFO")


def test_named_streams_are_independent_and_checked():
    first = [substream(7, name).random() for name in STREAMS]
    assert len(set(first)) == len(STREAMS)
    assert substream(7, "mask", 3).random() == substream(7, "mask", 3).random()
    with pytest.raises(ValueError, match="anomaly"):
        substream(7, "anomaly")
