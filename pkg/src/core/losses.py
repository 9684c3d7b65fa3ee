#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
損失関数モジュール

RGB (L1)、D-SSIM、FLAME 正則化、差し替え可能な知覚損失と、その重み付き和。
各損失は値と入力に対する勾配を返す。
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import cv2
import numpy as np
from scipy.spatial import cKDTree

from src.core.deform import RigTemplate
from src.core.errors import ShapeMismatchError, WindowSizeError
from src.core.fields import TemplateOutput
from src.core.gaussian_cloud import LossWeights


logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(pred: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"画像の形状が一致しません: {pred.shape} と {target.shape}")
    return pred, target


# ---------------------------------------------------------------------------
# RGB
# ---------------------------------------------------------------------------

def rgb_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    画素・チャンネル平均の絶対誤差

    Returns:
        (損失, pred に対する勾配)
    """
    pred, target = _check_pair(pred, target)
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def ssim_window() -> np.ndarray:
    """11x11、σ = 1.5 のガウス窓"""
    kernel = cv2.getGaussianKernel(SSIM_WINDOW, SSIM_SIGMA, cv2.CV_64F)
    return kernel @ kernel.T


def _filter(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    """ゼロ埋めの same 畳み込み（窓は対称なので相関と一致）"""
    return cv2.filter2D(image, cv2.CV_64F, window, borderType=cv2.BORDER_CONSTANT)


@dataclass
class _SsimTerms:
    mu1: np.ndarray
    mu2: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    ssim_map: np.ndarray


def _ssim_terms(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> _SsimTerms:
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu1 = _filter(x, window)
    mu2 = _filter(y, window)
    sigma1 = _filter(x * x, window) - mu1 * mu1
    sigma2 = _filter(y * y, window) - mu2 * mu2
    sigma12 = _filter(x * y, window) - mu1 * mu2
    a1 = 2.0 * mu1 * mu2 + c1
    a2 = 2.0 * sigma12 + c2
    b1 = mu1 * mu1 + mu2 * mu2 + c1
    b2 = sigma1 + sigma2 + c2
    return _SsimTerms(mu1, mu2, a1, a2, b1, b2, (a1 * a2) / (b1 * b2))


def ssim(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    SSIM（11x11 ガウス窓、σ = 1.5、k₁ = 0.01、k₂ = 0.03、ダイナミックレンジ 1）

    Args:
        pred: 画像 (H, W, 3)
        target: 画像 (H, W, 3)

    Returns:
        (画素・チャンネル平均の SSIM, pred に対する勾配)

    Raises:
        WindowSizeError: 画像が窓より小さい
    """
    x, y = _check_pair(pred, target)
    if min(x.shape[0], x.shape[1]) < SSIM_WINDOW:
        raise WindowSizeError(f"画像 {x.shape[:2]} が SSIM 窓 {SSIM_WINDOW} より小さいです")
    window = ssim_window()
    t = _ssim_terms(x, y, window)
    s = t.ssim_map
    scale = 1.0 / s.size

    # μ1, E[x²], E[xy] を独立変数とみたときの偏微分
    d_mu1 = s * (2.0 * t.mu2 / t.a1 - 2.0 * t.mu1 / t.b1 + 2.0 * t.mu1 / t.b2 - 2.0 * t.mu2 / t.a2)
    d_xx = -s / t.b2
    d_xy = 2.0 * s / t.a2
    grad = (
        _filter(d_mu1 * scale, window)
        + 2.0 * x * _filter(d_xx * scale, window)
        + y * _filter(d_xy * scale, window)
    )
    return float(np.mean(s)), grad


def dssim_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """(1 - SSIM) / 2"""
    value, grad = ssim(pred, target)
    return (1.0 - value) / 2.0, -0.5 * grad


# ---------------------------------------------------------------------------
# FLAME 正則化
# ---------------------------------------------------------------------------

@dataclass
class PseudoGroundTruth:
    """最近傍テンプレート頂点から取った点ごとの基底・重み"""
    expr_bases: np.ndarray
    pose_bases: np.ndarray
    skin_weights: np.ndarray
    vertex_index: np.ndarray


def nearest_vertex(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """各点に最も近い頂点のインデックス（k-d 木）"""
    _, index = cKDTree(np.asarray(vertices, dtype=np.float64)).query(np.asarray(points, dtype=np.float64))
    return np.asarray(index, dtype=np.int64)


def pseudo_ground_truth(points: np.ndarray, template: RigTemplate) -> PseudoGroundTruth:
    """カノニカル位置ごとに最近傍頂点の基底を割り当てる"""
    index = nearest_vertex(points, template.vertices)
    return PseudoGroundTruth(
        expr_bases=template.expr_bases[index],
        pose_bases=template.pose_bases[index],
        skin_weights=template.skin_weights[index],
        vertex_index=index,
    )


def _norm_rows(delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """点ごとに平坦化したノルムと、その勾配方向"""
    flat = delta.reshape(delta.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    direction = np.where(norms[:, None] > 0.0, flat / safe[:, None], 0.0)
    return norms, direction.reshape(delta.shape)


def flame_reg_loss(
    learned: TemplateOutput,
    pseudo: PseudoGroundTruth,
    weights: Optional[LossWeights] = None,
) -> Tuple[float, TemplateOutput]:
    """
    点平均の λ_e‖ΔE‖ + λ_p‖ΔP‖ + λ_w‖ΔW‖

    Returns:
        (損失, 学習済みテンプレート出力に対する勾配)
    """
    weights = weights or LossWeights()
    n = learned.skin_weights.shape[0]
    if n == 0:
        return 0.0, TemplateOutput(
            np.zeros_like(learned.expr_bases), np.zeros_like(learned.pose_bases), np.zeros_like(learned.skin_weights)
        )
    norm_e, dir_e = _norm_rows(learned.expr_bases - pseudo.expr_bases)
    norm_p, dir_p = _norm_rows(learned.pose_bases - pseudo.pose_bases)
    norm_w, dir_w = _norm_rows(learned.skin_weights - pseudo.skin_weights)
    value = np.mean(weights.lambda_e * norm_e + weights.lambda_p * norm_p + weights.lambda_w * norm_w)
    grads = TemplateOutput(
        expr_bases=weights.lambda_e * dir_e / n,
        pose_bases=weights.lambda_p * dir_p / n,
        skin_weights=weights.lambda_w * dir_w / n,
    )
    return float(value), grads


# ---------------------------------------------------------------------------
# 知覚損失
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """
    知覚損失用の特徴抽出器インターフェース
    """

    def features(self, image: np.ndarray) -> List[np.ndarray]:
        raise NotImplementedError

    def backward(self, image: np.ndarray, grads: List[np.ndarray]) -> np.ndarray:
        """特徴に対する勾配を画像に対する勾配へ戻す"""
        raise NotImplementedError


class IdentityExtractor(FeatureExtractor):
    """画素値そのものを特徴とする"""

    def features(self, image: np.ndarray) -> List[np.ndarray]:
        return [np.asarray(image, dtype=np.float64)]

    def backward(self, image: np.ndarray, grads: List[np.ndarray]) -> np.ndarray:
        return grads[0]


class RandomConvExtractor(FeatureExtractor):
    """
    シードで固定したランダム 3x3 畳み込み + ReLU の積み重ね

    事前学習済み VGG の代用品であり、同等のものではない。
    """

    def __init__(self, layers: int = 4, channels: int = 8, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.kernels = []
        self.biases = []
        in_channels = 3
        for _ in range(layers):
            std = np.sqrt(2.0 / (9 * in_channels))
            self.kernels.append(rng.normal(0.0, std, size=(channels, in_channels, 3, 3)))
            self.biases.append(rng.normal(0.0, 0.01, size=channels))
            in_channels = channels

    @staticmethod
    def _conv(x: np.ndarray, kernels: np.ndarray, flip: bool = False) -> np.ndarray:
        out_channels, in_channels = kernels.shape[:2]
        out = np.zeros(x.shape[:2] + (out_channels,))
        for o in range(out_channels):
            for i in range(in_channels):
                k = cv2.flip(kernels[o, i], -1) if flip else kernels[o, i]
                out[:, :, o] += cv2.filter2D(np.ascontiguousarray(x[:, :, i]), cv2.CV_64F, k,
                                             borderType=cv2.BORDER_CONSTANT)
        return out

    def _forward(self, image: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        hidden = np.asarray(image, dtype=np.float64)
        pre, post = [], []
        for kernels, bias in zip(self.kernels, self.biases):
            z = self._conv(hidden, kernels) + bias
            hidden = np.maximum(z, 0.0)
            pre.append(z)
            post.append(hidden)
        return pre, post

    def features(self, image: np.ndarray) -> List[np.ndarray]:
        return self._forward(image)[1]

    def backward(self, image: np.ndarray, grads: List[np.ndarray]) -> np.ndarray:
        pre, _ = self._forward(image)
        grad = np.zeros_like(pre[-1])
        for layer in reversed(range(len(self.kernels))):
            grad = (grad + grads[layer]) * (pre[layer] > 0.0)
            transposed = np.transpose(self.kernels[layer], (1, 0, 2, 3))
            grad = self._conv(grad, transposed, flip=True)
        return grad


def perceptual_loss(
    pred: np.ndarray,
    target: np.ndarray,
    extractor: Optional[FeatureExtractor],
) -> Tuple[float, np.ndarray]:
    """
    特徴スタック間の L1（層ごとの平均の平均）

    抽出器がなければ 0 を返し警告する。
    """
    pred, target = _check_pair(pred, target)
    if extractor is None:
        logger.warning("知覚損失の特徴抽出器が設定されていないため、0 として扱います")
        return 0.0, np.zeros_like(pred)
    feats_pred = extractor.features(pred)
    feats_target = extractor.features(target)
    n_layers = len(feats_pred)
    value = 0.0
    grads = []
    for fp, ft in zip(feats_pred, feats_target):
        diff = fp - ft
        value += np.mean(np.abs(diff)) / n_layers
        grads.append(np.sign(diff) / (diff.size * n_layers))
    return float(value), extractor.backward(pred, grads)


def make_extractor(kind: str, seed: int = 1234) -> Optional[FeatureExtractor]:
    """設定値 loss.extractor から抽出器を作る"""
    if kind == "random_conv":
        return RandomConvExtractor(seed=seed)
    if kind == "identity":
        return IdentityExtractor()
    if kind == "none":
        return None
    raise ValueError(f"不明な特徴抽出器です: {kind}")


# ---------------------------------------------------------------------------
# 合計
# ---------------------------------------------------------------------------

@dataclass
class LossParts:
    rgb: float = 0.0
    dssim: float = 0.0
    flame: float = 0.0
    vgg: float = 0.0

    def as_dict(self) -> dict:
        return {"rgb": self.rgb, "dssim": self.dssim, "flame": self.flame, "vgg": self.vgg}


def total_loss(parts: LossParts, weights: Optional[LossWeights] = None, flame_multiplier: float = 1.0) -> float:
    """λ_rgb·L_rgb + λ_dssim·L_dssim + λ_flame·L_flame + λ_vgg·L_vgg"""
    weights = weights or LossWeights()
    return (
        weights.lambda_rgb * parts.rgb
        + weights.lambda_dssim * parts.dssim
        + weights.lambda_flame * flame_multiplier * parts.flame
        + weights.lambda_vgg * parts.vgg
    )


def image_losses(
    pred: np.ndarray,
    target: np.ndarray,
    weights: LossWeights,
    extractor: Optional[FeatureExtractor] = None,
) -> Tuple[LossParts, np.ndarray]:
    """
    画像空間の損失（RGB・D-SSIM・知覚）と、重み付き和の画像に対する勾配
    """
    parts = LossParts()
    parts.rgb, grad = rgb_loss(pred, target)
    grad = weights.lambda_rgb * grad
    if weights.lambda_dssim > 0.0:
        parts.dssim, g = dssim_loss(pred, target)
        grad = grad + weights.lambda_dssim * g
    if weights.lambda_vgg > 0.0:
        parts.vgg, g = perceptual_loss(pred, target, extractor)
        grad = grad + weights.lambda_vgg * g
    return parts, grad
