#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
例外定義モジュール
"""

from typing import Optional


class AvatarError(ValueError):
    """アバターパイプライン共通の基底例外"""


class DegenerateRotationError(AvatarError):
    """ノルムがゼロのクォータニオンが渡された"""


class ShapeMismatchError(AvatarError):
    """配列の次元・形状が一致しない"""


class WindowSizeError(AvatarError):
    """画像が SSIM ウィンドウより小さい"""


class CheckpointError(AvatarError):
    """チェックポイントのバージョン不一致、または破損"""


class ConfigError(AvatarError):
    """設定キーが不明、または値を解釈できない"""

    def __init__(self, key: str, message: str = ""):
        self.key = key
        super().__init__(message or f"不明な設定キーです: {key}")


class NonFiniteError(AvatarError):
    """損失または勾配に NaN / Inf が現れた"""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
