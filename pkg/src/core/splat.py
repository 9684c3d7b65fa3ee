#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
ガウススプラッティングモジュール

3D 共分散の構築、EWA 射影、画素ごとの重み、前から後ろへの合成と、
全ガウスを全画素で評価する検証用レンダラを提供する。
射影と共分散の随伴もここに置き、タイル版レンダラと共有する。
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from src.core.errors import DegenerateRotationError
from src.core.gaussian_cloud import (
    SCALE_LOGIT_MAX, Camera, GaussianCloud, quaternion_to_matrix, sigmoid,
)


# 3D-GS 参照実装の定数
LOW_PASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4


def scale_activation(raw: np.ndarray, rendering_radius: float = 0.0) -> np.ndarray:
    """
    exp(raw) + ρ_e（exp はオーバーフロー防止のため上限付き）
    """
    if rendering_radius < 0.0:
        raise ValueError(f"描画半径は非負である必要があります: {rendering_radius}")
    return np.exp(np.minimum(np.asarray(raw, dtype=np.float64), SCALE_LOGIT_MAX)) + rendering_radius


def covariances(rotation_matrices: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Σ = R S Sᵀ Rᵀ を (N, 3, 3) で計算"""
    m = rotation_matrices * scales[:, None, :]
    return m @ np.transpose(m, (0, 2, 1))


def covariance_3d(rotation: Sequence[float], scale: Sequence[float]) -> np.ndarray:
    """
    単位クォータニオンと活性化後スケールから 3x3 共分散を作る

    Args:
        rotation: 単位クォータニオン (w, x, y, z)
        scale: 活性化後のスケール (3,)

    Returns:
        対称正定値の 3x3 行列
    """
    q = np.asarray(rotation, dtype=np.float64).reshape(1, 4)
    s = np.asarray(scale, dtype=np.float64).reshape(1, 3)
    return covariances(quaternion_to_matrix(q), s)[0]


def covariance_backward(
    rotation_matrices: np.ndarray, scales: np.ndarray, grad_cov: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    covariances の随伴

    Returns:
        (回転行列への勾配 (N, 3, 3), 活性化後スケールへの勾配 (N, 3))
    """
    m = rotation_matrices * scales[:, None, :]
    grad_m = (grad_cov + np.transpose(grad_cov, (0, 2, 1))) @ m
    grad_rot = grad_m * scales[:, None, :]
    grad_scales = np.sum(grad_m * rotation_matrices, axis=1)
    return grad_rot, grad_scales


# ---------------------------------------------------------------------------
# 射影
# ---------------------------------------------------------------------------

@dataclass
class Projected2DGaussian:
    """画素空間に射影された1個のガウス"""
    mean: np.ndarray        # (2,) 画素
    cov: np.ndarray         # (2, 2) 画素²
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class ProjectedGaussians:
    """
    射影済みガウスの列指向バッファ

    view / jacobians / cov3d などは随伴計算のために保持する。
    """
    means2d: np.ndarray      # (N, 2)
    cov2d: np.ndarray        # (N, 2, 2)
    conics: np.ndarray       # (N, 2, 2) cov2d の逆行列
    depths: np.ndarray       # (N,)
    opacities: np.ndarray    # (N,) 活性化後
    colors: np.ndarray       # (N, 3) 活性化後
    visible: np.ndarray      # (N,) bool
    view: np.ndarray         # (N, 3) カメラ座標
    jacobians: np.ndarray    # (N, 2, 3)
    cov3d: np.ndarray        # (N, 3, 3)
    rotation_matrices: np.ndarray
    unit_rotations: np.ndarray
    rotation_norms: np.ndarray
    scales: np.ndarray       # 活性化後

    @property
    def n_points(self) -> int:
        return int(self.depths.shape[0])

    def depth_order(self) -> np.ndarray:
        """可視点を (深度, 点番号) の昇順で並べたインデックス"""
        index = np.flatnonzero(self.visible)
        order = np.lexsort((index, self.depths[index]))
        return index[order]


def projection_jacobian(view: np.ndarray, camera: Camera) -> np.ndarray:
    """透視射影のアフィン近似ヤコビアン (N, 2, 3)"""
    x, y, z = view[:, 0], view[:, 1], view[:, 2]
    jac = np.zeros((view.shape[0], 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * x / (z * z)
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * y / (z * z)
    return jac


def project_points(means: np.ndarray, cov3d: np.ndarray, camera: Camera):
    """
    平均と 3D 共分散をまとめて射影する

    Returns:
        (画素平均, 2D 共分散, 深度, 可視フラグ, カメラ座標, ヤコビアン)
    """
    view = np.asarray(means, dtype=np.float64) @ camera.rotation.T + camera.translation
    depth = view[:, 2]
    visible = (depth > camera.near) & (depth < camera.far)
    safe = view.copy()
    safe[~visible, 2] = 1.0
    jac = projection_jacobian(safe, camera)
    means2d = np.stack([
        camera.fx * safe[:, 0] / safe[:, 2] + camera.cx,
        camera.fy * safe[:, 1] / safe[:, 2] + camera.cy,
    ], axis=1)
    t = jac @ camera.rotation
    cov2d = t @ cov3d @ np.transpose(t, (0, 2, 1)) + LOW_PASS * np.eye(2)[None]
    return means2d, cov2d, depth, visible, safe, jac


def project_gaussian(mean: Sequence[float], cov: np.ndarray, camera: Camera,
                     opacity: float = 1.0, color: Sequence[float] = (1.0, 1.0, 1.0)
                     ) -> Optional[Projected2DGaussian]:
    """
    1個のガウスを射影する

    Returns:
        射影結果。near / far の外側にあるときは None（カリング）
    """
    means2d, cov2d, depth, visible, _, _ = project_points(
        np.asarray(mean, dtype=np.float64).reshape(1, 3),
        np.asarray(cov, dtype=np.float64).reshape(1, 3, 3),
        camera,
    )
    if not visible[0]:
        return None
    return Projected2DGaussian(
        mean=means2d[0], cov=cov2d[0], depth=float(depth[0]),
        opacity=float(opacity), color=np.asarray(color, dtype=np.float64),
    )


def inverse_2x2(m: np.ndarray) -> np.ndarray:
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    inv = np.empty_like(m)
    inv[:, 0, 0] = m[:, 1, 1] / det
    inv[:, 1, 1] = m[:, 0, 0] / det
    inv[:, 0, 1] = -m[:, 0, 1] / det
    inv[:, 1, 0] = -m[:, 1, 0] / det
    return inv


def prepare_cloud(cloud: GaussianCloud, camera: Camera, rendering_radius: float = 0.0) -> ProjectedGaussians:
    """
    点群を活性化して射影する

    Raises:
        DegenerateRotationError: ノルムゼロのクォータニオンがある
    """
    rotations = np.asarray(cloud.rotations, dtype=np.float64)
    norms = np.linalg.norm(rotations, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateRotationError(f"ノルムゼロのクォータニオンがあります: {np.flatnonzero(norms == 0.0)[:5]}")
    unit = rotations / norms[:, None]
    rot_mats = quaternion_to_matrix(unit)
    scales = scale_activation(cloud.scales, rendering_radius)
    cov3d = covariances(rot_mats, scales)
    means2d, cov2d, depth, visible, view, jac = project_points(cloud.means, cov3d, camera)
    return ProjectedGaussians(
        means2d=means2d, cov2d=cov2d, conics=inverse_2x2(cov2d), depths=depth,
        opacities=sigmoid(np.asarray(cloud.opacities, dtype=np.float64)[:, 0]),
        colors=sigmoid(np.asarray(cloud.colors, dtype=np.float64)),
        visible=visible, view=view, jacobians=jac, cov3d=cov3d,
        rotation_matrices=rot_mats, unit_rotations=unit, rotation_norms=norms, scales=scales,
    )


def projection_backward(
    projected: ProjectedGaussians,
    camera: Camera,
    grad_means2d: np.ndarray,
    grad_cov2d: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    project_points の随伴

    Returns:
        (ワールド平均への勾配 (N, 3), 3D 共分散への勾配 (N, 3, 3))
    """
    view = projected.view
    x, y, z = view[:, 0], view[:, 1], view[:, 2]
    fx, fy = camera.fx, camera.fy
    t = projected.jacobians @ camera.rotation
    t_t = np.transpose(t, (0, 2, 1))

    grad_cov3d = t_t @ grad_cov2d @ t
    grad_t = (grad_cov2d + np.transpose(grad_cov2d, (0, 2, 1))) @ t @ projected.cov3d
    grad_jac = grad_t @ camera.rotation.T

    z2 = z * z
    z3 = z2 * z
    grad_view = np.zeros_like(view)
    grad_view[:, 0] = grad_means2d[:, 0] * fx / z - grad_jac[:, 0, 2] * fx / z2
    grad_view[:, 1] = grad_means2d[:, 1] * fy / z - grad_jac[:, 1, 2] * fy / z2
    grad_view[:, 2] = (
        -grad_means2d[:, 0] * fx * x / z2
        - grad_means2d[:, 1] * fy * y / z2
        - grad_jac[:, 0, 0] * fx / z2
        + grad_jac[:, 0, 2] * 2.0 * fx * x / z3
        - grad_jac[:, 1, 1] * fy / z2
        + grad_jac[:, 1, 2] * 2.0 * fy * y / z3
    )
    grad_view[~projected.visible] = 0.0
    grad_cov3d[~projected.visible] = 0.0
    return grad_view @ camera.rotation, grad_cov3d


# ---------------------------------------------------------------------------
# 画素の重みと合成
# ---------------------------------------------------------------------------

def gaussian_pixel_weight(g: Projected2DGaussian, pixel: Sequence[float]) -> float:
    """
    α = opacity · exp(-½ dᵀ Σ'⁻¹ d)（0.99 で上限、1/255 未満は 0）

    Args:
        g: 射影済みガウス
        pixel: 画素中心 (u, v)
    """
    d = np.asarray(pixel, dtype=np.float64) - g.mean
    power = -0.5 * float(d @ np.linalg.solve(g.cov, d))
    alpha = min(ALPHA_MAX, g.opacity * np.exp(power))
    return 0.0 if alpha < ALPHA_MIN else alpha


def composite_pixel(
    alphas: Sequence[float],
    colors: np.ndarray,
    background: Sequence[float] = (0.0, 0.0, 0.0),
) -> np.ndarray:
    """
    前から後ろへ並んだ寄与を合成する

    T·(1-α) が 1e-4 を下回る寄与に達したらその寄与を含めずに打ち切り、
    残りの透過率で背景を合成する。
    """
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(3)
    transmittance = 1.0
    for alpha, color in zip(alphas, colors):
        if alpha < ALPHA_MIN:
            continue
        next_t = transmittance * (1.0 - alpha)
        if next_t < TRANSMITTANCE_MIN:
            break
        out += color * alpha * transmittance
        transmittance = next_t
    return out + transmittance * np.asarray(background, dtype=np.float64)


def pixel_centers(camera: Camera) -> np.ndarray:
    """全画素中心 (H*W, 2)、行優先"""
    rows, cols = np.mgrid[0:camera.height, 0:camera.width]
    return np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)


def alpha_values(offsets: np.ndarray, conic: np.ndarray, opacity) -> Tuple[np.ndarray, np.ndarray]:
    """
    画素オフセット d = p - μ に対する α（上限・下限処理済み）とガウス項 exp(power)

    offsets の最後の軸は (du, dv)。conic は末尾2軸が 2x2。
    """
    du = offsets[..., 0]
    dv = offsets[..., 1]
    power = -0.5 * (conic[..., 0, 0] * du * du + 2.0 * conic[..., 0, 1] * du * dv + conic[..., 1, 1] * dv * dv)
    gauss = np.exp(power)
    alpha = np.minimum(opacity * gauss, ALPHA_MAX)
    alpha = np.where(alpha < ALPHA_MIN, 0.0, alpha)
    return alpha, gauss


def render_oracle(
    cloud: GaussianCloud,
    camera: Camera,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    rendering_radius: float = 0.0,
) -> np.ndarray:
    """
    全ガウスを全画素で評価する倍精度レンダラ（タイル分割・空間カリングなし）

    Returns:
        画像 (H, W, 3)
    """
    background = np.asarray(background, dtype=np.float64)
    pixels = pixel_centers(camera)
    n_pixels = pixels.shape[0]
    color = np.zeros((n_pixels, 3))
    transmittance = np.ones(n_pixels)
    active = np.ones(n_pixels, dtype=bool)

    if cloud.n_points > 0:
        projected = prepare_cloud(cloud, camera, rendering_radius)
        for i in projected.depth_order():
            alpha, _ = alpha_values(pixels - projected.means2d[i], projected.conics[i], projected.opacities[i])
            hit = active & (alpha > 0.0)
            next_t = transmittance * (1.0 - alpha)
            stop = hit & (next_t < TRANSMITTANCE_MIN)
            active &= ~stop
            hit &= ~stop
            color[hit] += projected.colors[i] * (alpha[hit] * transmittance[hit])[:, None]
            transmittance[hit] = next_t[hit]

    color += transmittance[:, None] * background
    return color.reshape(camera.height, camera.width, 3)
