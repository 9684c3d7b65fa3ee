#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
点の挿入・削除モジュール

エポックごとの目標点数・サンプリング半径・描画半径の表と、
不透明度による削除、親点まわりの球内へのアップサンプリングを提供する。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np


logger = logging.getLogger(__name__)

EARLY_TARGETS = (400, 800, 1600, 3200, 6400, 10000, 20000, 40000)
MIDDLE_TARGETS = (80000, 100000)
FINAL_TARGET = 100000
STRATEGIES = ("schedule", "pointavatar")


@dataclass(frozen=True)
class ScheduleEntry:
    """1エポック分の予定"""
    epoch: int
    target_count: int
    sampling_radius: float
    rendering_radius: float
    upsample: bool


@dataclass(frozen=True)
class LifecycleSchedule:
    """
    粗から細への点群スケジュール

    Attributes:
        initial_radius: サンプリング半径の初期値 r₀
        render_radius: 描画半径の初期値
        decay: 半径の減衰率 λ_f
        prune_threshold: 削除する平均不透明度（シグモイド後）
        min_radius: 最終段のサンプリング半径
        max_points: 目標点数の上限
        epoch_scale: 実行エポックを予定表のエポックへ写す倍率
        strategy: schedule / pointavatar
    """
    initial_radius: float = 0.5
    render_radius: float = 0.5
    decay: float = 0.75
    prune_threshold: float = 0.1
    min_radius: float = 0.004
    max_points: int = FINAL_TARGET
    epoch_scale: float = 1.0
    strategy: str = "schedule"
    init_points: int = 400
    init_sphere_radius: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"減衰率は (0, 1) である必要があります: {self.decay}")
        if self.initial_radius < 0.0 or self.render_radius < 0.0 or self.min_radius < 0.0:
            raise ValueError("半径は非負である必要があります")
        if self.max_points < 1 or self.init_points < 1:
            raise ValueError("点数は1以上である必要があります")
        if self.epoch_scale <= 0.0:
            raise ValueError(f"epoch_scale は正である必要があります: {self.epoch_scale}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"不明な戦略です: {self.strategy}")

    @classmethod
    def from_config(cls, config) -> "LifecycleSchedule":
        return cls(
            initial_radius=config.get("lifecycle.initial_radius"),
            render_radius=config.get("lifecycle.render_radius"),
            decay=config.get("lifecycle.decay"),
            prune_threshold=config.get("lifecycle.prune_threshold"),
            min_radius=config.get("lifecycle.min_radius"),
            max_points=config.get("lifecycle.max_points"),
            epoch_scale=config.get("lifecycle.epoch_scale"),
            strategy=config.get("lifecycle.strategy"),
            init_points=config.get("lifecycle.init_points"),
            init_sphere_radius=config.get("lifecycle.init_sphere_radius"),
            enabled=config.get("lifecycle.enabled"),
        )

    def schedule_epoch(self, epoch: int) -> int:
        return int(np.floor(epoch * self.epoch_scale + 1e-9))

    def at_epoch(self, epoch: int) -> ScheduleEntry:
        return schedule_at_epoch(epoch, self)


def _stage(e: int) -> Tuple[int, int]:
    """予定表エポックから (目標点数, 減衰回数) を求める"""
    if e < 40:
        return EARLY_TARGETS[e // 5], e // 5
    if e < 60:
        step = (e - 40) // 10
        return MIDDLE_TARGETS[step], len(EARLY_TARGETS) + step
    return FINAL_TARGET, len(EARLY_TARGETS) + len(MIDDLE_TARGETS) + (min(e, 100) - 60) // 5


def schedule_at_epoch(epoch: int, schedule: Optional[LifecycleSchedule] = None) -> ScheduleEntry:
    """
    エポックの目標点数と半径

    0-39: 5エポックごとに 400 ... 40000、40-59: 10エポックごとに 80000, 100000、
    60 以降: 100000 固定、半径は 100 エポックまで5エポックごとに減衰し、
    サンプリング半径はそれ以降 min_radius で一定。

    Args:
        epoch: 実行エポック (0 始まり)
        schedule: スケジュール設定

    Returns:
        ScheduleEntry
    """
    if epoch < 0:
        raise ValueError(f"エポックは非負である必要があります: {epoch}")
    schedule = schedule or LifecycleSchedule()
    e = schedule.schedule_epoch(epoch)

    if schedule.strategy == "pointavatar":
        doublings = e // 5
        target = min(schedule.init_points * 2 ** min(doublings, 40), schedule.max_points)
        upsample = e > 0 and e % 5 == 0
        return ScheduleEntry(
            epoch=epoch,
            target_count=int(target),
            sampling_radius=schedule.initial_radius,
            rendering_radius=schedule.render_radius * schedule.decay ** doublings,
            upsample=upsample,
        )

    target, decays = _stage(e)
    previous = _stage(schedule.schedule_epoch(epoch - 1))[0] if epoch > 0 else target
    sampling = schedule.initial_radius * schedule.decay ** decays
    sampling = schedule.min_radius if e >= 100 else max(sampling, schedule.min_radius)
    target = min(target, schedule.max_points)
    return ScheduleEntry(
        epoch=epoch,
        target_count=int(target),
        sampling_radius=float(sampling),
        rendering_radius=float(schedule.render_radius * schedule.decay ** decays),
        upsample=target > min(previous, schedule.max_points),
    )


# ---------------------------------------------------------------------------
# 点の生成・削除
# ---------------------------------------------------------------------------

def initial_points(schedule: LifecycleSchedule, rng: np.random.Generator) -> np.ndarray:
    """半径 init_sphere_radius の球面上に一様に点を置く"""
    directions = rng.normal(size=(schedule.init_points, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * schedule.init_sphere_radius


def prune(points: np.ndarray, mean_opacity: np.ndarray, threshold: float = 0.1) -> Tuple[np.ndarray, np.ndarray]:
    """
    エポック平均の変形空間不透明度が閾値未満の点を取り除く

    すべてが削除対象になる場合は最大不透明度の1点を残して警告する。

    Args:
        points: 位置 (N, 3)
        mean_opacity: 点ごとの平均不透明度（シグモイド後）(N,)
        threshold: 閾値

    Returns:
        (残った位置, 残したインデックス)
    """
    mean_opacity = np.asarray(mean_opacity, dtype=np.float64).reshape(-1)
    if mean_opacity.shape[0] != points.shape[0]:
        raise ValueError(f"不透明度の数 {mean_opacity.shape[0]} が点数 {points.shape[0]} と一致しません")
    keep = np.flatnonzero(mean_opacity >= threshold)
    if keep.size == 0 and points.shape[0] > 0:
        best = int(np.argmax(mean_opacity))
        logger.warning(
            "すべての点が削除対象になったため、最大不透明度 %.4f の点 %d を残します",
            mean_opacity[best], best,
        )
        keep = np.array([best])
    if keep.size < points.shape[0]:
        logger.debug("削除: %d -> %d 点", points.shape[0], keep.size)
    return points[keep], keep


def prune_unseen(points: np.ndarray, first_hits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """どの画素でも最初に寄与しなかった点を取り除く（pointavatar 戦略）"""
    first_hits = np.asarray(first_hits).reshape(-1)
    keep = np.flatnonzero(first_hits > 0)
    if keep.size == 0 and points.shape[0] > 0:
        logger.warning("最初に寄与した点がないため、点 0 を残します")
        keep = np.array([0])
    return points[keep], keep


def upsample(
    points: np.ndarray,
    target_count: int,
    sampling_radius: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    親点を一様に（重複あり）選び、その周りの半径 sampling_radius の球内に子を置く

    Args:
        points: 現在の位置 (N, 3)
        target_count: 目標点数
        sampling_radius: サンプリング半径
        rng: 乱数生成器

    Returns:
        (目標点数になった位置, 子の親インデックス)
    """
    n = points.shape[0]
    n_new = target_count - n
    if n_new <= 0 or n == 0:
        return points, np.zeros(0, dtype=np.int64)
    parents = rng.integers(0, n, size=n_new)
    directions = rng.normal(size=(n_new, 3))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    directions /= np.where(norms > 0.0, norms, 1.0)
    radii = sampling_radius * rng.random(n_new) ** (1.0 / 3.0)
    children = points[parents] + directions * radii[:, None]
    return np.concatenate([points, children]), parents


@dataclass
class LifecycleResult:
    points: np.ndarray
    keep: np.ndarray
    n_added: int
    entry: ScheduleEntry


def end_of_epoch(
    points: np.ndarray,
    epoch: int,
    schedule: LifecycleSchedule,
    rng: np.random.Generator,
    mean_opacity: Optional[np.ndarray] = None,
    first_hits: Optional[np.ndarray] = None,
) -> LifecycleResult:
    """
    エポック終了時の削除とアップサンプリング

    schedule 戦略では、終了後の点数はそのエポックの目標点数に一致する。
    """
    entry = schedule_at_epoch(epoch, schedule)
    if schedule.strategy == "pointavatar":
        kept, keep = prune_unseen(points, first_hits if first_hits is not None else np.ones(len(points)))
        target = min(2 * kept.shape[0], schedule.max_points) if entry.upsample else kept.shape[0]
    else:
        if mean_opacity is None:
            kept, keep = points, np.arange(points.shape[0])
        else:
            kept, keep = prune(points, mean_opacity, schedule.prune_threshold)
        target = entry.target_count
    grown, _ = upsample(kept, target, entry.sampling_radius, rng)
    logger.info(
        "エポック %d: 点数 %d -> %d (削除 %d, 追加 %d), サンプリング半径 %.4g",
        epoch, points.shape[0], grown.shape[0], points.shape[0] - kept.shape[0],
        grown.shape[0] - kept.shape[0], entry.sampling_radius,
    )
    return LifecycleResult(points=grown, keep=keep, n_added=grown.shape[0] - kept.shape[0], entry=entry)
