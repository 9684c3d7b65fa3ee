#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
チェックポイント入出力モジュール

numpy の npz コンテナに、JSON ヘッダ（0次元の文字列配列 "header"）と
名前付き配列をまとめて保存する。pickle は使わない。
"""

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from src.core.errors import CheckpointError


CHECKPOINT_VERSION = 1
CHECKPOINT_FORMAT = "gaussian-head-avatar"
HEADER_KEY = "header"


@dataclass
class CheckpointData:
    """ヘッダ（JSON 化できる辞書）と配列の組"""
    header: Dict[str, object] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


class CheckpointFile:
    """チェックポイントの読み書き"""

    @staticmethod
    def save(data: CheckpointData, file_path: str) -> Optional[str]:
        """
        チェックポイントを保存する

        Args:
            data: ヘッダと配列
            file_path: 保存先（拡張子 .npz）

        Returns:
            エラーメッセージ、または成功時None
        """
        if HEADER_KEY in data.arrays:
            return f"配列名 {HEADER_KEY} は予約されています"
        header = dict(data.header)
        header["format"] = CHECKPOINT_FORMAT
        header["version"] = CHECKPOINT_VERSION
        try:
            path = Path(file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            payload = {name: np.asarray(value) for name, value in data.arrays.items()}
            payload[HEADER_KEY] = np.array(json.dumps(header, sort_keys=True))
            with open(path, 'wb') as f:
                np.savez(f, **payload)
            return None
        except Exception as e:
            return f"チェックポイントの保存エラー: {str(e)}"

    @staticmethod
    def load(file_path: str) -> Tuple[Optional[CheckpointData], Optional[str]]:
        """
        チェックポイントを読み込む

        Returns:
            (CheckpointData, エラーメッセージ)

        Raises:
            CheckpointError: 形式・バージョンの不一致、または破損
        """
        path = Path(file_path)
        if not path.exists():
            return None, f"チェックポイントが見つかりません: {file_path}"
        try:
            with np.load(str(path), allow_pickle=False) as archive:
                arrays = {name: archive[name] for name in archive.files}
        except (zipfile.BadZipFile, ValueError, OSError, EOFError) as e:
            raise CheckpointError(f"チェックポイントが破損しています: {file_path}: {e}")

        if HEADER_KEY not in arrays:
            raise CheckpointError(f"チェックポイントにヘッダがありません: {file_path}")
        try:
            header = json.loads(str(arrays.pop(HEADER_KEY)))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"チェックポイントのヘッダが不正です: {e}")
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"チェックポイントの形式が不明です: {header.get('format')}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"チェックポイントのバージョン {header.get('version')} は対応していません"
                f"（対応: {CHECKPOINT_VERSION}）"
            )
        return CheckpointData(header=header, arrays=arrays), None
