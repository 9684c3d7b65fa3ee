#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
タイル分割レンダラモジュール

16x16 画素のタイルごとにガウスのリストを作り、前から後ろへ合成する高速経路と、
その解析的な逆伝播を提供する。タイルはスレッドプールで並列に処理し、
点ごとの勾配は固定のタイル順で集約する。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.core.gaussian_cloud import SCALE_LOGIT_MAX, Camera, GaussianCloud, quaternion_matrix_backward
from src.core.splat import (
    ALPHA_MAX, ALPHA_MIN, TRANSMITTANCE_MIN,
    ProjectedGaussians, alpha_values, covariance_backward, prepare_cloud, projection_backward,
)


logger = logging.getLogger(__name__)

TILE_SIZE = 16
# 境界楕円の外接矩形に加える余白（画素）
BOUND_MARGIN = 1e-6


@dataclass
class Tile:
    """1タイル分の画素範囲と、深度順に並んだガウス番号"""
    row0: int
    row1: int
    col0: int
    col1: int
    indices: np.ndarray

    def pixel_centers(self) -> np.ndarray:
        rows, cols = np.mgrid[self.row0:self.row1, self.col0:self.col1]
        return np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)


@dataclass
class RenderTape:
    """render_backward に必要な記録"""
    cloud: GaussianCloud
    camera: Camera
    projected: Optional[ProjectedGaussians]
    tiles: List[Tile]
    background: np.ndarray
    rendering_radius: float
    threads: int
    first_hits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class RenderGrads:
    """点群の活性化前属性に対する勾配"""
    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


def gaussian_bounds(projected: ProjectedGaussians) -> Tuple[np.ndarray, np.ndarray]:
    """
    α ≥ 1/255 となる楕円 dᵀΣ'⁻¹d ≤ 2 ln(255·opacity) の外接矩形の半幅

    Returns:
        (半幅 (N, 2), 寄与しうるかのフラグ (N,))
    """
    opacity = projected.opacities
    reach = projected.visible & (opacity >= ALPHA_MIN)
    k2 = np.where(reach, 2.0 * np.log(np.maximum(opacity, ALPHA_MIN) / ALPHA_MIN), 0.0)
    diag = np.stack([projected.cov2d[:, 0, 0], projected.cov2d[:, 1, 1]], axis=1)
    half = np.sqrt(k2[:, None] * diag) + BOUND_MARGIN
    return half, reach


def build_tiles(projected: ProjectedGaussians, camera: Camera) -> List[Tile]:
    """
    ガウスごとの外接矩形から、(タイル, 深度順位) をキーにソートしたタイルリストを作る
    """
    n_tiles_x = (camera.width + TILE_SIZE - 1) // TILE_SIZE
    n_tiles_y = (camera.height + TILE_SIZE - 1) // TILE_SIZE

    order = projected.depth_order()
    half, reach = gaussian_bounds(projected)
    order = order[reach[order]]
    mean = projected.means2d[order]
    col_lo = np.ceil(mean[:, 0] - half[order, 0])
    col_hi = np.floor(mean[:, 0] + half[order, 0])
    row_lo = np.ceil(mean[:, 1] - half[order, 1])
    row_hi = np.floor(mean[:, 1] + half[order, 1])
    inside = (col_hi >= 0) & (col_lo <= camera.width - 1) & (row_hi >= 0) & (row_lo <= camera.height - 1)
    inside &= (col_lo <= col_hi) & (row_lo <= row_hi)
    order, col_lo, col_hi, row_lo, row_hi = (a[inside] for a in (order, col_lo, col_hi, row_lo, row_hi))
    rank = np.flatnonzero(inside)

    tx0 = (np.clip(col_lo, 0, camera.width - 1) // TILE_SIZE).astype(np.int64)
    tx1 = (np.clip(col_hi, 0, camera.width - 1) // TILE_SIZE).astype(np.int64)
    ty0 = (np.clip(row_lo, 0, camera.height - 1) // TILE_SIZE).astype(np.int64)
    ty1 = (np.clip(row_hi, 0, camera.height - 1) // TILE_SIZE).astype(np.int64)
    span_x = tx1 - tx0 + 1
    counts = span_x * (ty1 - ty0 + 1)

    total = int(counts.sum())
    owner = np.repeat(np.arange(order.shape[0]), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    tile_x = tx0[owner] + local % span_x[owner]
    tile_y = ty0[owner] + local // span_x[owner]
    tile_id = tile_y * n_tiles_x + tile_x

    keyed = np.lexsort((rank[owner], tile_id))
    tile_id = tile_id[keyed]
    gaussian = order[owner[keyed]]
    bounds = np.searchsorted(tile_id, np.arange(n_tiles_x * n_tiles_y + 1))

    tiles = []
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t = ty * n_tiles_x + tx
            tiles.append(Tile(
                row0=ty * TILE_SIZE, row1=min((ty + 1) * TILE_SIZE, camera.height),
                col0=tx * TILE_SIZE, col1=min((tx + 1) * TILE_SIZE, camera.width),
                indices=gaussian[bounds[t]:bounds[t + 1]],
            ))
    return tiles


@dataclass
class _TileState:
    offsets: np.ndarray      # (P, K, 2)
    alpha: np.ndarray        # (P, K) 打ち切り後の有効 α
    gauss: np.ndarray        # (P, K)
    clamped: np.ndarray      # (P, K) 0.99 で上限処理された
    before: np.ndarray       # (P, K) 各寄与の直前の透過率
    final: np.ndarray        # (P,)


def _tile_state(tile: Tile, projected: ProjectedGaussians, dtype) -> _TileState:
    idx = tile.indices
    pixels = tile.pixel_centers().astype(dtype)
    offsets = pixels[:, None, :] - projected.means2d[idx].astype(dtype)[None]
    opacity = projected.opacities[idx].astype(dtype)
    alpha, gauss = alpha_values(offsets, projected.conics[idx].astype(dtype)[None], opacity[None])
    alpha = alpha.astype(dtype)
    included = np.cumprod(1.0 - alpha, axis=1) >= TRANSMITTANCE_MIN
    alpha = np.where(included, alpha, 0.0).astype(dtype)
    transmittance = np.cumprod(1.0 - alpha, axis=1)
    before = np.concatenate([np.ones((alpha.shape[0], 1), dtype=dtype), transmittance[:, :-1]], axis=1)
    return _TileState(
        offsets=offsets,
        alpha=alpha,
        gauss=gauss,
        clamped=opacity[None] * gauss >= ALPHA_MAX,
        before=before,
        final=transmittance[:, -1],
    )


def _tile_forward(tile: Tile, projected: ProjectedGaussians, background: np.ndarray, dtype):
    n_pixels = (tile.row1 - tile.row0) * (tile.col1 - tile.col0)
    if tile.indices.size == 0:
        return np.broadcast_to(background, (n_pixels, 3)).copy(), np.full(n_pixels, -1)
    state = _tile_state(tile, projected, dtype)
    weights = state.alpha * state.before
    color = weights @ projected.colors[tile.indices].astype(dtype) + state.final[:, None] * background.astype(dtype)
    hit = state.alpha > 0.0
    first = np.where(hit.any(axis=1), tile.indices[np.argmax(hit, axis=1)], -1)
    return color.astype(np.float64), first


def render_fast(
    cloud: GaussianCloud,
    camera: Camera,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    rendering_radius: float = 0.0,
    threads: int = 1,
    dtype: str = "float64",
) -> Tuple[np.ndarray, RenderTape]:
    """
    タイル分割による高速レンダリング

    Args:
        cloud: 変形空間の点群
        camera: カメラ
        background: 背景色
        rendering_radius: スケールに加える描画半径
        threads: タイル処理のワーカー数
        dtype: 合成の精度 (float64 / float32)

    Returns:
        (画像 (H, W, 3), テープ)
    """
    background = np.asarray(background, dtype=np.float64)
    precision = np.dtype(dtype)
    image = np.empty((camera.height, camera.width, 3))
    first_hits = np.zeros(cloud.n_points, dtype=np.int64)

    if cloud.n_points == 0:
        image[:] = background
        tape = RenderTape(cloud, camera, None, [], background, rendering_radius, threads, first_hits)
        return image, tape

    projected = prepare_cloud(cloud, camera, rendering_radius)
    tiles = build_tiles(projected, camera)

    def work(tile: Tile):
        return _tile_forward(tile, projected, background, precision)

    results = _map_tiles(work, tiles, threads)
    for tile, (color, first) in zip(tiles, results):
        image[tile.row0:tile.row1, tile.col0:tile.col1] = color.reshape(tile.row1 - tile.row0, tile.col1 - tile.col0, 3)
        hits = first[first >= 0]
        np.add.at(first_hits, hits, 1)

    tape = RenderTape(cloud, camera, projected, tiles, background, rendering_radius, threads, first_hits)
    return image, tape


def _map_tiles(fn, tiles: List[Tile], threads: int) -> list:
    """タイル順を保ったまま fn を適用する"""
    if threads <= 1:
        return [fn(tile) for tile in tiles]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, tiles))


def _tile_backward(tile: Tile, projected: ProjectedGaussians, background: np.ndarray, grad_image: np.ndarray):
    """
    1タイルの部分勾配

    Returns:
        (画素平均, 逆共分散, 不透明度, 色 の勾配) いずれもタイル内ガウス順
    """
    idx = tile.indices
    state = _tile_state(tile, projected, np.float64)
    colors = projected.colors[idx]
    grad_pixel = grad_image[tile.row0:tile.row1, tile.col0:tile.col1].reshape(-1, 3)

    weights = state.alpha * state.before
    grad_colors = weights.T @ grad_pixel

    # S_k = Σ_{m>k} c_m α_m T_m + T_final·bg
    contrib = weights[:, :, None] * colors[None]
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    suffix += state.final[:, None, None] * background[None, None]
    per_channel = state.before[:, :, None] * colors[None] - suffix / (1.0 - state.alpha)[:, :, None]
    grad_alpha = np.einsum("pkc,pc->pk", per_channel, grad_pixel)
    grad_alpha = np.where((state.alpha > 0.0) & ~state.clamped, grad_alpha, 0.0)

    opacity = projected.opacities[idx]
    grad_opacity = np.sum(grad_alpha * state.gauss, axis=0)
    grad_power = grad_alpha * opacity[None] * state.gauss

    conic = projected.conics[idx]
    du = state.offsets[..., 0]
    dv = state.offsets[..., 1]
    grad_mean = np.stack([
        np.sum(grad_power * (conic[None, :, 0, 0] * du + conic[None, :, 0, 1] * dv), axis=0),
        np.sum(grad_power * (conic[None, :, 1, 0] * du + conic[None, :, 1, 1] * dv), axis=0),
    ], axis=1)
    grad_conic = -0.5 * np.einsum("pk,pka,pkb->kab", grad_power, state.offsets, state.offsets)
    return grad_mean, grad_conic, grad_opacity, grad_colors


def render_backward(tape: RenderTape, grad_image: np.ndarray) -> RenderGrads:
    """
    render_fast の随伴

    Args:
        tape: render_fast のテープ
        grad_image: 画像に対する勾配 (H, W, 3)

    Returns:
        平均・クォータニオン・スケールロジット・不透明度ロジット・色ロジットへの勾配
    """
    cloud = tape.cloud
    n = cloud.n_points
    grads = RenderGrads(
        means=np.zeros((n, 3)), rotations=np.zeros((n, 4)), scales=np.zeros((n, 3)),
        opacities=np.zeros((n, 1)), colors=np.zeros((n, 3)),
    )
    projected = tape.projected
    if projected is None:
        return grads
    grad_image = np.asarray(grad_image, dtype=np.float64)

    def work(tile: Tile):
        if tile.indices.size == 0:
            return None
        return _tile_backward(tile, projected, tape.background, grad_image)

    grad_means2d = np.zeros((n, 2))
    grad_conics = np.zeros((n, 2, 2))
    grad_opacity = np.zeros(n)
    grad_colors = np.zeros((n, 3))
    for tile, partial in zip(tape.tiles, _map_tiles(work, tape.tiles, tape.threads)):
        if partial is None:
            continue
        g_mean, g_conic, g_opa, g_col = partial
        np.add.at(grad_means2d, tile.indices, g_mean)
        np.add.at(grad_conics, tile.indices, g_conic)
        np.add.at(grad_opacity, tile.indices, g_opa)
        np.add.at(grad_colors, tile.indices, g_col)

    conic = projected.conics
    grad_cov2d = -conic @ grad_conics @ conic
    grads.means, grad_cov3d = projection_backward(projected, tape.camera, grad_means2d, grad_cov2d)

    grad_rot_mats, grad_scales = covariance_backward(projected.rotation_matrices, projected.scales, grad_cov3d)
    unit = projected.unit_rotations
    grad_unit = quaternion_matrix_backward(unit, grad_rot_mats)
    radial = np.sum(unit * grad_unit, axis=1, keepdims=True)
    grads.rotations = (grad_unit - unit * radial) / projected.rotation_norms[:, None]

    raw_scales = np.asarray(cloud.scales, dtype=np.float64)
    grads.scales = grad_scales * np.exp(np.minimum(raw_scales, SCALE_LOGIT_MAX)) * (raw_scales < SCALE_LOGIT_MAX)

    opa = projected.opacities
    grads.opacities = (grad_opacity * opa * (1.0 - opa))[:, None]
    col = projected.colors
    grads.colors = grad_colors * col * (1.0 - col)
    return grads


def render(
    cloud: GaussianCloud,
    camera: Camera,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    rendering_radius: float = 0.0,
    threads: int = 1,
    dtype: str = "float64",
) -> np.ndarray:
    """テープが不要なときの render_fast"""
    image, _ = render_fast(cloud, camera, background, rendering_radius, threads, dtype)
    return image
