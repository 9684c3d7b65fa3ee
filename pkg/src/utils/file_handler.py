#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
ファイル操作ユーティリティモジュール

画像 (PNG / NPY)、点群 (PLY)、カメラ (JSON)、フレーム係数 (CSV)、
リグ (JSON テキスト) の読み書き。読み込みは (値, エラーメッセージ)、
書き込みはエラーメッセージ（成功時 None）を返す。
"""

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np
from plyfile import PlyData, PlyElement

from src.core.gaussian_cloud import SPACE_TAGS, Camera, GaussianCloud, PoseExpression, sigmoid


PLY_PROPERTIES = (
    "x", "y", "z",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "scale_0", "scale_1", "scale_2",
    "opacity",
    "f_red", "f_green", "f_blue",
)
COLOR_PROPERTIES = ("red", "green", "blue")


class FileHandler:
    """ファイル操作ユーティリティクラス"""

    IMAGE_FORMATS = {'.png', '.npy'}

    # ------------------------------------------------------------------
    # 画像
    # ------------------------------------------------------------------

    @staticmethod
    def load_image(file_path: str) -> Tuple[Optional[np.ndarray], Optional[str]]:
        """
        画像を読み込む（日本語パス対応）

        PNG は 8bit を [0, 1] に、NPY は float32 の (H, W, 3) をそのまま読む。

        Args:
            file_path: ファイルパス

        Returns:
            (RGB 画像 float64 (H, W, 3), エラーメッセージ) のタプル
            成功時はエラーメッセージがNone
        """
        path = Path(file_path)

        if path.suffix.lower() not in FileHandler.IMAGE_FORMATS:
            return None, f"非対応のファイル形式です。PNG / NPY のみ対応しています: {file_path}"

        try:
            if path.suffix.lower() == '.npy':
                image = np.load(str(path), allow_pickle=False)
                if image.ndim != 3 or image.shape[2] != 3:
                    return None, f"画像配列の形状が不正です: {image.shape}"
                return image.astype(np.float64), None

            with open(file_path, 'rb') as f:
                file_bytes = np.frombuffer(f.read(), dtype=np.uint8)
            image = cv2.imdecode(file_bytes, cv2.IMREAD_COLOR)
            if image is None:
                return None, f"画像をデコードできませんでした: {file_path}"
            return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0, None
        except FileNotFoundError:
            return None, f"ファイルが見つかりません: {file_path}"
        except PermissionError:
            return None, f"ファイルへのアクセス権限がありません: {file_path}"
        except Exception as e:
            return None, f"読み込みエラー: {str(e)}"

    @staticmethod
    def to_uint8(image: np.ndarray) -> np.ndarray:
        return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)

    @staticmethod
    def save_image(image: np.ndarray, file_path: str) -> Optional[str]:
        """
        画像を保存（日本語パス対応）

        拡張子 .npy なら float32 のまま、それ以外は 8bit PNG で保存する。

        Args:
            image: RGB 画像 (H, W, 3)、値域 [0, 1]
            file_path: 保存先パス

        Returns:
            エラーメッセージ、または成功時None
        """
        path = Path(file_path)
        if path.suffix.lower() not in FileHandler.IMAGE_FORMATS:
            path = path.with_suffix('.png')

        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            if path.suffix.lower() == '.npy':
                np.save(str(path), np.asarray(image, dtype=np.float32), allow_pickle=False)
                return None

            bgr = cv2.cvtColor(FileHandler.to_uint8(image), cv2.COLOR_RGB2BGR)
            success, encoded_image = cv2.imencode('.png', bgr)
            if not success:
                return f"画像のエンコードに失敗しました: {file_path}"
            with open(str(path), 'wb') as f:
                f.write(encoded_image.tobytes())
            return None
        except Exception as e:
            return f"保存エラー: {str(e)}"

    # ------------------------------------------------------------------
    # PLY
    # ------------------------------------------------------------------

    @staticmethod
    def save_ply(cloud: GaussianCloud, file_path: str) -> Optional[str]:
        """
        点群を binary little endian の PLY で保存する

        属性は活性化前の値を倍精度で書き出す。ビューア向けに活性化後の色を
        uint8 の red / green / blue としても書くが、読み込みでは使わない。
        """
        try:
            path = Path(file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            attributes = np.concatenate(
                [cloud.means, cloud.rotations, cloud.scales, cloud.opacities, cloud.colors], axis=1
            )
            dtype = [(name, 'f8') for name in PLY_PROPERTIES] + [(name, 'u1') for name in COLOR_PROPERTIES]
            elements = np.empty(cloud.n_points, dtype=dtype)
            for column, name in enumerate(PLY_PROPERTIES):
                elements[name] = attributes[:, column]
            display = np.clip(np.rint(sigmoid(cloud.colors) * 255.0), 0, 255).astype(np.uint8)
            for column, name in enumerate(COLOR_PROPERTIES):
                elements[name] = display[:, column]
            element = PlyElement.describe(elements, 'vertex')
            PlyData([element], text=False, byte_order='<',
                    comments=[f"space_tag {cloud.space_tag}"]).write(str(path))
            return None
        except Exception as e:
            return f"PLY の保存エラー: {str(e)}"

    @staticmethod
    def load_ply(file_path: str) -> Tuple[Optional[GaussianCloud], Optional[str]]:
        """PLY を読み込んで点群に戻す"""
        try:
            data = PlyData.read(str(file_path))
            vertex = data['vertex']
            columns = np.stack([np.asarray(vertex[name], dtype=np.float64) for name in PLY_PROPERTIES], axis=1)
        except FileNotFoundError:
            return None, f"ファイルが見つかりません: {file_path}"
        except (KeyError, ValueError) as e:
            return None, f"PLY の形式が不正です: {str(e)}"
        except Exception as e:
            return None, f"PLY の読み込みエラー: {str(e)}"

        space_tag = "deformed"
        for comment in data.comments:
            key, _, value = comment.partition(" ")
            if key == "space_tag" and value in SPACE_TAGS:
                space_tag = value
        cloud = GaussianCloud(
            means=columns[:, 0:3],
            rotations=columns[:, 3:7],
            scales=columns[:, 7:10],
            opacities=columns[:, 10:11],
            colors=columns[:, 11:14],
            space_tag=space_tag,
        )
        return cloud, None

    # ------------------------------------------------------------------
    # JSON / CSV
    # ------------------------------------------------------------------

    @staticmethod
    def save_json(data: dict, file_path: str) -> Optional[str]:
        try:
            path = Path(file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(data, indent=2, ensure_ascii=False), encoding='utf-8')
            return None
        except Exception as e:
            return f"保存エラー: {str(e)}"

    @staticmethod
    def load_json(file_path: str) -> Tuple[Optional[dict], Optional[str]]:
        try:
            return json.loads(Path(file_path).read_text(encoding='utf-8')), None
        except FileNotFoundError:
            return None, f"ファイルが見つかりません: {file_path}"
        except json.JSONDecodeError as e:
            return None, f"JSON の形式が不正です: {file_path}: {str(e)}"
        except Exception as e:
            return None, f"読み込みエラー: {str(e)}"

    @staticmethod
    def save_cameras(cameras: List[Camera], file_path: str) -> Optional[str]:
        return FileHandler.save_json(
            {"frames": [{"index": i, "camera": cam.to_dict()} for i, cam in enumerate(cameras)]},
            file_path,
        )

    @staticmethod
    def load_cameras(file_path: str) -> Tuple[Optional[List[Camera]], Optional[str]]:
        data, error = FileHandler.load_json(file_path)
        if error:
            return None, error
        try:
            frames = sorted(data["frames"], key=lambda item: item["index"])
            return [Camera.from_dict(item["camera"]) for item in frames], None
        except (KeyError, TypeError, ValueError) as e:
            return None, f"カメラファイルの形式が不正です: {str(e)}"

    @staticmethod
    def save_latents(
        latents: List[PoseExpression], splits: List[str], file_path: str
    ) -> Optional[str]:
        """
        フレームごとの θ, ψ を CSV に保存する

        列: frame, split, theta_0 ... theta_{3J-1}, psi_0 ... psi_{E-1}
        """
        if len(latents) != len(splits):
            return "係数と分割ラベルの数が一致しません"
        try:
            path = Path(file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            n_theta = latents[0].theta.size if latents else 0
            n_psi = latents[0].psi.size if latents else 0
            header = ["frame", "split"] + [f"theta_{i}" for i in range(n_theta)] + [f"psi_{i}" for i in range(n_psi)]
            with open(path, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(header)
                for index, (latent, split) in enumerate(zip(latents, splits)):
                    writer.writerow([index, split] + [repr(float(v)) for v in latent.flat()])
            return None
        except Exception as e:
            return f"保存エラー: {str(e)}"

    @staticmethod
    def load_latents(file_path: str, n_joints: int) -> Tuple[Optional[Tuple[List[PoseExpression], List[str]]], Optional[str]]:
        """save_latents の逆。戻り値は ((係数リスト, 分割ラベル), エラー)"""
        try:
            with open(file_path, newline='', encoding='utf-8') as f:
                rows = list(csv.DictReader(f))
        except FileNotFoundError:
            return None, f"ファイルが見つかりません: {file_path}"
        except Exception as e:
            return None, f"読み込みエラー: {str(e)}"
        latents, splits = [], []
        try:
            for row in sorted(rows, key=lambda r: int(r["frame"])):
                theta = np.array([float(row[f"theta_{i}"]) for i in range(3 * n_joints)]).reshape(n_joints, 3)
                n_psi = sum(1 for key in row if key.startswith("psi_"))
                psi = np.array([float(row[f"psi_{i}"]) for i in range(n_psi)])
                latents.append(PoseExpression(theta=theta, psi=psi))
                splits.append(row["split"])
        except (KeyError, ValueError) as e:
            return None, f"係数ファイルの形式が不正です: {str(e)}"
        return (latents, splits), None

    @staticmethod
    def save_rows(rows: List[Dict], file_path: str, append: bool = False) -> Optional[str]:
        """辞書の並びを CSV に書き出す（append 時は既存ファイルにヘッダを重複させない）"""
        if not rows:
            return None
        try:
            path = Path(file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            write_header = not (append and path.exists())
            with open(path, 'a' if append else 'w', newline='', encoding='utf-8') as f:
                writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
                if write_header:
                    writer.writeheader()
                writer.writerows(rows)
            return None
        except Exception as e:
            return f"保存エラー: {str(e)}"

    @staticmethod
    def load_meta(file_path: str) -> Tuple[Optional[Dict[str, str]], Optional[str]]:
        """key = value 形式のメタデータを読み込む"""
        try:
            lines = Path(file_path).read_text(encoding='utf-8').splitlines()
        except FileNotFoundError:
            return None, f"ファイルが見つかりません: {file_path}"
        except Exception as e:
            return None, f"読み込みエラー: {str(e)}"
        meta = {}
        for line in lines:
            key, sep, value = line.partition("=")
            if sep:
                meta[key.strip()] = value.strip()
        return meta, None

    @staticmethod
    def save_meta(meta: Dict[str, object], file_path: str) -> Optional[str]:
        try:
            path = Path(file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(f"{key} = {value}\n" for key, value in meta.items()), encoding='utf-8')
            return None
        except Exception as e:
            return f"保存エラー: {str(e)}"
