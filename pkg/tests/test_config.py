#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
設定モジュールのテスト
"""

import pytest

from src.core.errors import ConfigError
from src.utils.config import DEFAULTS, Config, parse_value


class TestConfig:
    """Config のテストクラス"""

    def test_defaults(self):
        config = Config()
        assert config.get("train.epochs") == 120
        assert config.get("lifecycle.decay") == 0.75
        assert config.get("render.background") == (0.0, 0.0, 0.0)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            Config().get("train.nothing")
        with pytest.raises(ConfigError):
            Config().set("train.nothing", 1)

    def test_string_values_parsed_by_default_type(self):
        config = Config()
        config.set("train.epochs", "7")
        config.set("train.lr", "0.5")
        config.set("lifecycle.enabled", "off")
        config.set("train.lr_decay_epochs", "(3, 4)")
        assert config.get("train.epochs") == 7
        assert config.get("train.lr") == 0.5
        assert config.get("lifecycle.enabled") is False
        assert config.get("train.lr_decay_epochs") == (3, 4)

    def test_int_promoted_to_float(self):
        config = Config({"train.lr": 1})
        assert isinstance(config.get("train.lr"), float)

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_value("train.epochs", "many")
        with pytest.raises(ConfigError):
            parse_value("lifecycle.enabled", "maybe")

    def test_precedence(self, tmp_path):
        path = tmp_path / "avatar.cfg"
        path.write_text("# 学習\ntrain.epochs = 30\nfields.hidden = 16  # 小さめ\n", encoding="utf-8")
        config = Config.from_sources(preset="desk", path=str(path), overrides=["fields.hidden=24"])
        assert config.get("train.epochs") == 30
        assert config.get("fields.hidden") == 24
        assert config.get("lifecycle.epoch_scale") == 1.5

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            Config.from_sources(preset="laptop")

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            Config().load_text("train.epochs 5")

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            Config().apply_overrides(["train.epochs"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            Config().load_file(str(tmp_path / "none.cfg"))

    def test_dump_round_trip(self):
        config = Config.from_sources(preset="desk")
        restored = Config()
        restored.load_text(config.dump())
        for key in DEFAULTS:
            assert restored.get(key) == config.get(key), key
        assert restored.digest() == config.digest()

    def test_section(self):
        section = Config().section("loss")
        assert section["lambda_rgb"] == 1.0
        assert "extractor" in section
