#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
設定モジュール

`section.key = value` 形式のフラットな設定。値の型は既定値の型で決まる。
優先順位: 既定値 < プリセット < 設定ファイル < コマンドライン。
"""

import hashlib
from pathlib import Path
from typing import Dict, Iterable, Optional

from src.core.errors import ConfigError


DEFAULTS: Dict[str, object] = {
    # 合成データ
    "data.n_frames": 64,
    "data.n_heldout": 8,
    "data.width": 128,
    "data.height": 128,
    "data.n_gt_points": 2000,
    "data.n_template_vertices": 500,
    "data.gt_scale": 0.015,
    "data.gt_opacity": 0.9,
    "data.focal": 200.0,
    "data.distance": 2.5,
    "data.orbit_degrees": 25.0,
    "data.jaw_amplitude": 0.35,
    "data.expr_amplitude": 1.0,
    "data.mouth_darkening": 0.8,
    # リグ
    "rig.n_expressions": 10,
    # フィールド
    "fields.hidden": 128,
    "fields.depth": 3,
    "fields.encoding_bands": 0,
    "fields.offset_cap": 0.5,
    "fields.initial_scale": 0.01,
    "fields.initial_opacity": 0.5,
    "fields.head_scale": 0.01,
    "fields.deform_enabled": True,
    # 描画
    "render.background": (0.0, 0.0, 0.0),
    "render.resolution": 0,
    "render.dtype": "float64",
    # 点の挿入・削除
    "lifecycle.enabled": True,
    "lifecycle.strategy": "schedule",
    "lifecycle.initial_radius": 0.5,
    "lifecycle.render_radius": 0.5,
    "lifecycle.decay": 0.75,
    "lifecycle.prune_threshold": 0.1,
    "lifecycle.min_radius": 0.004,
    "lifecycle.max_points": 100000,
    "lifecycle.epoch_scale": 1.0,
    "lifecycle.init_points": 400,
    "lifecycle.init_sphere_radius": 0.5,
    # 損失
    "loss.lambda_rgb": 1.0,
    "loss.lambda_dssim": 0.25,
    "loss.lambda_flame": 1.0,
    "loss.lambda_vgg": 0.1,
    "loss.lambda_e": 1000.0,
    "loss.lambda_p": 1000.0,
    "loss.lambda_w": 1.0,
    "loss.extractor": "random_conv",
    "loss.extractor_seed": 1234,
    # 学習
    "train.epochs": 120,
    "train.lr": 1e-4,
    "train.betas": (0.9, 0.999),
    "train.lr_decay_epochs": (80, 100),
    "train.lr_decay": 0.5,
    "train.flame_decay_epochs": (20, 30, 50, 70),
    "train.flame_decay": 0.5,
    "train.finetune_latents": False,
    "train.latent_lr": 1e-3,
    "train.checkpoint_every": 10,
    "train.on_nonfinite": "abort",
    "train.progress": True,
    # 評価
    "eval.split": "heldout",
    "eval.finetune_steps": 0,
    "eval.finetune_lr": 1e-3,
    # 実行
    "run.seed": 42,
    "run.threads": 1,
}

PRESETS: Dict[str, Dict[str, object]] = {
    "default": {},
    "desk": {
        "train.epochs": 60,
        "lifecycle.epoch_scale": 1.5,
        "lifecycle.max_points": 20000,
        "lifecycle.render_radius": 0.1,
        "fields.hidden": 64,
        "run.threads": 8,
    },
}


def _parse_scalar(text: str, template: object, key: str) -> object:
    text = text.strip()
    try:
        if isinstance(template, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
    except ValueError:
        raise ConfigError(key, f"設定値を解釈できません: {key} = {text}")
    return text


def parse_value(key: str, text: str) -> object:
    """文字列を既定値の型に合わせて解釈する"""
    if key not in DEFAULTS:
        raise ConfigError(key)
    template = DEFAULTS[key]
    if isinstance(template, tuple):
        items = [item for item in text.replace("(", "").replace(")", "").split(",") if item.strip()]
        if not items:
            return ()
        return tuple(_parse_scalar(item, template[0], key) for item in items)
    return _parse_scalar(text, template, key)


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    return str(value)


class Config:
    """
    フラットな設定値の集合
    """

    def __init__(self, values: Optional[Dict[str, object]] = None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def get(self, key: str):
        if key not in self._values:
            raise ConfigError(key)
        return self._values[key]

    def set(self, key: str, value: object) -> None:
        if key not in DEFAULTS:
            raise ConfigError(key)
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = parse_value(key, value)
        elif isinstance(DEFAULTS[key], float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        self._values[key] = value

    def keys(self) -> Iterable[str]:
        return sorted(self._values)

    def apply_preset(self, name: str) -> None:
        if name not in PRESETS:
            raise ConfigError(f"preset.{name}", f"不明なプリセットです: {name}")
        for key, value in PRESETS[name].items():
            self.set(key, value)

    def load_text(self, text: str, source: str = "<text>") -> None:
        """`section.key = value` の行を読み込む（# 以降はコメント）"""
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(line, f"{source}:{number}: 'key = value' の形式ではありません")
            self.set(key.strip(), value.strip())

    def load_file(self, path: str) -> None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(str(path), f"設定ファイルを読み込めません: {e}")
        self.load_text(text, source=str(path))

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """`--set key=value` の並びを適用する"""
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(item, f"--set は key=value の形式で指定してください: {item}")
            self.set(key.strip(), value.strip())

    @classmethod
    def from_sources(
        cls,
        preset: str = "default",
        path: Optional[str] = None,
        overrides: Iterable[str] = (),
    ) -> "Config":
        config = cls()
        config.apply_preset(preset)
        if path:
            config.load_file(path)
        config.apply_overrides(overrides)
        return config

    def dump(self) -> str:
        return "".join(f"{key} = {format_value(self._values[key])}\n" for key in self.keys())

    def digest(self) -> str:
        """設定全体のハッシュ（データセットのメタ情報用）"""
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()[:16]

    def section(self, name: str) -> Dict[str, object]:
        prefix = name + "."
        return {key[len(prefix):]: value for key, value in self._values.items() if key.startswith(prefix)}
