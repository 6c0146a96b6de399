"""
Tests for config files, environment defaults and seeded substreams.
"""

import numpy as np
import pytest

from us_mae.config import (
    STREAM_MASK,
    STREAM_RECORD,
    default_log_level,
    default_workers,
    derive_rng,
    load_config_file,
    normalize_key,
    parse_bool,
)
from us_mae.errors import DataIOError, UsageError


class TestDeriveRng:
    """Test keyed random substreams."""

    def test_same_keys_same_stream(self):
        a = derive_rng(5, STREAM_RECORD, 17).random(8)
        b = derive_rng(5, STREAM_RECORD, 17).random(8)
        assert np.array_equal(a, b)

    def test_keys_separate_streams(self):
        base = derive_rng(5, STREAM_RECORD, 17).random(8)
        assert not np.array_equal(base, derive_rng(5, STREAM_RECORD, 18).random(8))
        assert not np.array_equal(base, derive_rng(5, STREAM_MASK, 17).random(8))
        assert not np.array_equal(base, derive_rng(6, STREAM_RECORD, 17).random(8))

    def test_independent_of_draw_order(self):
        first = derive_rng(1, STREAM_MASK, 0)
        first.random(1000)
        assert np.array_equal(derive_rng(1, STREAM_MASK, 1).random(4), derive_rng(1, STREAM_MASK, 1).random(4))

    def test_negative_seed(self):
        with pytest.raises(UsageError):
            derive_rng(-1)


class TestEnvironment:
    """Test environment-driven defaults."""

    def test_workers_default(self, monkeypatch):
        monkeypatch.delenv("US_MAE_WORKERS", raising=False)
        assert default_workers() == 1

    def test_workers_from_env(self, monkeypatch):
        monkeypatch.setenv("US_MAE_WORKERS", "6")
        assert default_workers() == 6

    @pytest.mark.parametrize("raw", ["zero", "0", "-2"])
    def test_invalid_workers(self, monkeypatch, raw):
        monkeypatch.setenv("US_MAE_WORKERS", raw)
        with pytest.raises(UsageError):
            default_workers()

    def test_log_level(self, monkeypatch):
        monkeypatch.setenv("US_MAE_LOG_LEVEL", "debug")
        assert default_log_level() == "DEBUG"
        monkeypatch.delenv("US_MAE_LOG_LEVEL")
        assert default_log_level() == "INFO"


class TestConfigFile:
    """Test key=value config files."""

    def test_parse(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text(
            "# pre-training run\n"
            "\n"
            "epochs = 30\n"
            "--batch-size=256\n"
            "output = runs/a=b\n",
            encoding="utf-8",
        )
        assert load_config_file(str(path)) == {"epochs": "30", "batch_size": "256", "output": "runs/a=b"}

    def test_line_without_equals(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("epochs 30\n", encoding="utf-8")
        with pytest.raises(UsageError, match="bad.conf:1"):
            load_config_file(str(path))

    def test_empty_key(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text(" = 3\n", encoding="utf-8")
        with pytest.raises(UsageError):
            load_config_file(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError):
            load_config_file(str(tmp_path / "absent.conf"))

    def test_normalize_key(self):
        assert normalize_key("--freq-min") == "freq_min"
        assert normalize_key(" mask_ratio ") == "mask_ratio"

    @pytest.mark.parametrize("raw,expected", [("yes", True), ("On", True), ("0", False), ("false", False)])
    def test_parse_bool(self, raw, expected):
        assert parse_bool(raw) is expected

    def test_parse_bool_rejects(self):
        with pytest.raises(UsageError):
            parse_bool("maybe")
