#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
ドメイン型モジュール

ガウス点群・ポーズ/表情係数・カメラ・損失重みと、
クォータニオンなどの基本的な幾何ヘルパーを定義する。
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.core.errors import DegenerateRotationError, ShapeMismatchError


SPACE_TAGS = ("initialized", "canonical", "deformed")

# 活性化後のスケールを計算する際の exp のオーバーフロー上限
SCALE_LOGIT_MAX = 80.0


def _as_float_array(values, shape: Tuple[int, ...]) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    return array.reshape(shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """
    オーバーフローしないシグモイド

    Args:
        x: 入力配列

    Returns:
        1 / (1 + exp(-x))
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def logit(p: np.ndarray) -> np.ndarray:
    """シグモイドの逆関数"""
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternion(q: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    クォータニオンを正規化し回転行列を返す

    Args:
        q: (w, x, y, z) の4成分

    Returns:
        (単位クォータニオン, 3x3 回転行列) のタプル

    Raises:
        DegenerateRotationError: ノルムがゼロの場合
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0.0:
        raise DegenerateRotationError(f"ノルムがゼロのクォータニオンです: {q.tolist()}")
    unit = q / norm
    return unit, quaternion_to_matrix(unit[None, :])[0]


def quaternion_to_matrix(unit_q: np.ndarray) -> np.ndarray:
    """
    単位クォータニオン (N, 4) を回転行列 (N, 3, 3) に変換

    Args:
        unit_q: 正規化済みクォータニオン (w, x, y, z)

    Returns:
        回転行列の配列
    """
    w, x, y, z = (unit_q[:, i] for i in range(4))
    rot = np.empty((unit_q.shape[0], 3, 3), dtype=np.float64)
    rot[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[:, 0, 1] = 2.0 * (x * y - w * z)
    rot[:, 0, 2] = 2.0 * (x * z + w * y)
    rot[:, 1, 0] = 2.0 * (x * y + w * z)
    rot[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[:, 1, 2] = 2.0 * (y * z - w * x)
    rot[:, 2, 0] = 2.0 * (x * z - w * y)
    rot[:, 2, 1] = 2.0 * (y * z + w * x)
    rot[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


def quaternion_matrix_backward(unit_q: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """
    quaternion_to_matrix の随伴

    Args:
        unit_q: 正規化済みクォータニオン (N, 4)
        grad_rot: 回転行列に対する勾配 (N, 3, 3)

    Returns:
        単位クォータニオンに対する勾配 (N, 4)
    """
    w, x, y, z = (unit_q[:, i] for i in range(4))
    g = grad_rot
    grad = np.empty_like(unit_q)
    grad[:, 0] = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
                        - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    grad[:, 1] = 2.0 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0]
                        - 2.0 * x * g[:, 1, 1] - w * g[:, 1, 2] + z * g[:, 2, 0]
                        + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2])
    grad[:, 2] = 2.0 * (-2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
                        + x * g[:, 1, 0] + z * g[:, 1, 2] - w * g[:, 2, 0]
                        + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2])
    grad[:, 3] = 2.0 * (-2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
                        + w * g[:, 1, 0] - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2]
                        + x * g[:, 2, 0] + y * g[:, 2, 1])
    return grad


@dataclass(frozen=True)
class GaussianCloud:
    """
    列指向のガウス点群

    回転・スケール・不透明度・色はすべて活性化前の値で保持する。
    """
    means: np.ndarray       # (N, 3) ワールド座標
    rotations: np.ndarray   # (N, 4) 未正規化クォータニオン (w, x, y, z)
    scales: np.ndarray      # (N, 3) exp 前のスケール
    opacities: np.ndarray   # (N, 1) シグモイド前のロジット
    colors: np.ndarray      # (N, 3) シグモイド前のロジット
    space_tag: str = "canonical"

    @property
    def n_points(self) -> int:
        return int(np.asarray(self.means).shape[0])

    @classmethod
    def from_means(cls, means: np.ndarray, space_tag: str = "initialized") -> "GaussianCloud":
        """位置のみから恒等回転・単位スケールの点群を作る"""
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = means.shape[0]
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(
            means=means,
            rotations=rotations,
            scales=np.zeros((n, 3)),
            opacities=np.zeros((n, 1)),
            colors=np.zeros((n, 3)),
            space_tag=space_tag,
        )

    def with_changes(self, **changes) -> "GaussianCloud":
        return replace(self, **changes)

    def subset(self, indices: np.ndarray) -> "GaussianCloud":
        """指定インデックスの点だけを持つ新しいスナップショット"""
        indices = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            means=self.means[indices],
            rotations=self.rotations[indices],
            scales=self.scales[indices],
            opacities=self.opacities[indices],
            colors=self.colors[indices],
            space_tag=self.space_tag,
        )

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            means=np.concatenate([self.means, other.means]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            scales=np.concatenate([self.scales, other.scales]),
            opacities=np.concatenate([self.opacities, other.opacities]),
            colors=np.concatenate([self.colors, other.colors]),
            space_tag=self.space_tag,
        )

    def unit_rotations(self) -> np.ndarray:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return self.rotations / norms

    def activated_scales(self, rendering_radius: float = 0.0) -> np.ndarray:
        return np.exp(np.minimum(self.scales, SCALE_LOGIT_MAX)) + rendering_radius

    def activated_opacities(self) -> np.ndarray:
        return sigmoid(self.opacities)

    def activated_colors(self) -> np.ndarray:
        return sigmoid(self.colors)


@dataclass(frozen=True)
class CloudViolation:
    """validate_cloud が報告する違反1件"""
    field: str
    message: str
    index: Optional[int] = None

    def __str__(self) -> str:
        where = "" if self.index is None else f"[{self.index}]"
        return f"{self.field}{where}: {self.message}"


_COLUMN_WIDTHS = {"means": 3, "rotations": 4, "scales": 3, "opacities": 1, "colors": 3}


def validate_cloud(cloud: GaussianCloud) -> List[CloudViolation]:
    """
    点群の不変条件を検査する（例外は投げない）

    Args:
        cloud: 検査対象

    Returns:
        違反のリスト。空なら有効
    """
    report: List[CloudViolation] = []

    if cloud.space_tag not in SPACE_TAGS:
        report.append(CloudViolation("space_tag", f"不明な空間タグ: {cloud.space_tag}"))

    columns = {}
    for name, width in _COLUMN_WIDTHS.items():
        column = np.asarray(getattr(cloud, name))
        if column.ndim != 2 or column.shape[1] != width:
            report.append(CloudViolation(name, f"形状 (N, {width}) が必要ですが {column.shape} です"))
            continue
        columns[name] = column

    lengths = {name: column.shape[0] for name, column in columns.items()}
    if len(set(lengths.values())) > 1:
        report.append(CloudViolation("structure", f"列の点数が一致しません: {lengths}"))
        return report

    for name, column in columns.items():
        bad_rows = np.flatnonzero(~np.all(np.isfinite(column), axis=1))
        for index in bad_rows:
            report.append(CloudViolation(name, "有限でない値を含みます", int(index)))

    if "rotations" in columns:
        norms = np.linalg.norm(columns["rotations"], axis=1)
        for index in np.flatnonzero(np.isfinite(norms) & (norms == 0.0)):
            report.append(CloudViolation("rotations", "ノルムがゼロです", int(index)))

    if "scales" in columns:
        finite = np.all(np.isfinite(columns["scales"]), axis=1)
        activated = np.exp(np.minimum(columns["scales"], SCALE_LOGIT_MAX))
        for index in np.flatnonzero(finite & np.any(activated <= 0.0, axis=1)):
            report.append(CloudViolation("scales", "活性化後のスケールが正ではありません", int(index)))

    return report


@dataclass(frozen=True)
class PoseExpression:
    """フレームごとのポーズ係数 θ と表情係数 ψ"""
    theta: np.ndarray   # (n_joints, 3) 軸角 [rad]
    psi: np.ndarray     # (E,)

    @classmethod
    def zeros(cls, n_joints: int, n_expressions: int) -> "PoseExpression":
        return cls(theta=np.zeros((n_joints, 3)), psi=np.zeros(n_expressions))

    def check(self, n_joints: int, n_expressions: int) -> None:
        """リグの関節数・表情基底数と一致するか確認する"""
        if np.shape(self.theta) != (n_joints, 3):
            raise ShapeMismatchError(
                f"theta の形状 {np.shape(self.theta)} が関節数 {n_joints} と一致しません"
            )
        if np.shape(self.psi) != (n_expressions,):
            raise ShapeMismatchError(
                f"psi の長さ {np.shape(self.psi)} が表情基底数 {n_expressions} と一致しません"
            )

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.theta), np.ravel(self.psi)])


@dataclass(frozen=True)
class Camera:
    """
    ピンホールカメラ（OpenCV 規約: +z が視線方向、y は下向き）

    画素 (row, col) の中心は画素座標 (u, v) = (col, row) にある。
    """
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))       # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 128
    height: int = 128
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_float_array(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _as_float_array(self.translation, (3,)))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"焦点距離は正である必要があります: fx={self.fx}, fy={self.fy}")
        if not self.near < self.far:
            raise ValueError(f"near < far である必要があります: near={self.near}, far={self.far}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"解像度が不正です: {self.width}x{self.height}")
        gram = self.rotation.T @ self.rotation
        if not np.allclose(gram, np.eye(3), atol=1e-9) or np.linalg.det(self.rotation) < 0:
            raise ValueError("外部パラメータの回転が正規直交ではありません")

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float] = (0.0, 0.0, 0.0),
        up: Sequence[float] = (0.0, 1.0, 0.0),
        width: int = 128,
        height: int = 128,
        focal: float = 200.0,
        near: float = 0.01,
        far: float = 100.0,
    ) -> "Camera":
        """
        視点と注視点からカメラを作る

        Args:
            eye: カメラ位置（ワールド座標）
            target: 注視点
            up: ワールドの上方向
            width: 画像幅
            height: 画像高さ
            focal: 焦点距離（画素）

        Returns:
            Camera
        """
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        down = -(up - np.dot(up, forward) * forward)
        down /= np.linalg.norm(down)
        right = np.cross(down, forward)
        rotation = np.stack([right, down, forward])
        return cls(
            fx=focal, fy=focal,
            cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            rotation=rotation, translation=-rotation @ eye,
            width=width, height=height, near=near, far=far,
        )

    def rescaled(self, width: int, height: int) -> "Camera":
        """解像度を変更し、内部パラメータを比例させたカメラ"""
        sx = width / self.width
        sy = height / self.height
        return replace(
            self,
            fx=self.fx * sx, fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5, cy=(self.cy + 0.5) * sy - 0.5,
            width=width, height=height,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        return cls(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            rotation=data["rotation"], translation=data["translation"],
            width=int(data["width"]), height=int(data["height"]),
            near=float(data["near"]), far=float(data["far"]),
        )


@dataclass(frozen=True)
class LossWeights:
    """損失の重み（既定値は学習詳細の値）"""
    lambda_rgb: float = 1.0
    lambda_dssim: float = 0.25
    lambda_flame: float = 1.0
    lambda_vgg: float = 0.1
    lambda_e: float = 1000.0
    lambda_p: float = 1000.0
    lambda_w: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value >= 0.0:
                raise ValueError(f"損失重み {name} は非負である必要があります: {value}")

    @classmethod
    def from_config(cls, config) -> "LossWeights":
        return cls(
            lambda_rgb=config.get("loss.lambda_rgb"),
            lambda_dssim=config.get("loss.lambda_dssim"),
            lambda_flame=config.get("loss.lambda_flame"),
            lambda_vgg=config.get("loss.lambda_vgg"),
            lambda_e=config.get("loss.lambda_e"),
            lambda_p=config.get("loss.lambda_p"),
            lambda_w=config.get("loss.lambda_w"),
        )
