#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
学習ループモジュール

フレームごとに 変形 → 描画 → 損失 → 逆伝播 → Adam を回し、エポック終了時に
点の削除とアップサンプリングを行う。学習率・FLAME 正則化の減衰、
フレーム係数の微調整、評価、チェックポイントもここで扱う。
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.core.autodiff import ParameterStore, adam_step
from src.core.deform import RigDefinition, RigTemplate, canonical_cloud, deform_backward, deform_cloud
from src.core.errors import CheckpointError, NonFiniteError
from src.core.fields import FieldBundle, FieldConfig, ParamBlock
from src.core.gaussian_cloud import Camera, GaussianCloud, LossWeights, PoseExpression
from src.core.lifecycle import LifecycleSchedule, ScheduleEntry, end_of_epoch, initial_points
from src.core.losses import (
    FeatureExtractor, LossParts, flame_reg_loss, image_losses, make_extractor,
    pseudo_ground_truth, rgb_loss, ssim, total_loss,
)
from src.core.rasterizer import RenderGrads, render_backward, render_fast
from src.core.splat import render_oracle
from src.core.synthdata import FrameRecord
from src.utils.checkpoint import CheckpointData, CheckpointFile
from src.utils.file_handler import FileHandler


logger = logging.getLogger(__name__)

POINTS = "points.means"
PSNR_CAP = 99.0
NONFINITE_MODES = ("abort", "skip")


@dataclass(frozen=True)
class TrainConfig:
    """
    学習設定

    Attributes:
        epochs: 実行エポック数
        lr: 初期学習率
        lr_decay_epochs: 学習率を減衰させる（予定表の）エポック
        flame_decay_epochs: FLAME 正則化の重みを減衰させるエポック
        resolution: 描画時の幅（0 ならデータセットのまま）
        finetune_latents: 学習中にフレームの θ, ψ も更新する
    """
    epochs: int = 120
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    lr_decay_epochs: Tuple[int, ...] = (80, 100)
    lr_decay: float = 0.5
    flame_decay_epochs: Tuple[int, ...] = (20, 30, 50, 70)
    flame_decay: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: LifecycleSchedule = field(default_factory=LifecycleSchedule)
    resolution: int = 0
    seed: int = 42
    finetune_latents: bool = False
    latent_lr: float = 1e-3
    checkpoint_every: int = 10
    on_nonfinite: str = "abort"
    progress: bool = True
    threads: int = 1
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    dtype: str = "float64"
    extractor: str = "random_conv"
    extractor_seed: int = 1234

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError(f"エポック数は正である必要があります: {self.epochs}")
        for name in ("lr_decay", "flame_decay"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} は (0, 1] である必要があります: {value}")
        if self.on_nonfinite not in NONFINITE_MODES:
            raise ValueError(f"on_nonfinite は {NONFINITE_MODES} のいずれかです: {self.on_nonfinite}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype は float64 / float32 のいずれかです: {self.dtype}")
        if self.threads < 1:
            raise ValueError(f"スレッド数は1以上である必要があります: {self.threads}")

    @classmethod
    def from_config(cls, config) -> "TrainConfig":
        return cls(
            epochs=config.get("train.epochs"),
            lr=config.get("train.lr"),
            betas=tuple(config.get("train.betas")),
            lr_decay_epochs=tuple(config.get("train.lr_decay_epochs")),
            lr_decay=config.get("train.lr_decay"),
            flame_decay_epochs=tuple(config.get("train.flame_decay_epochs")),
            flame_decay=config.get("train.flame_decay"),
            weights=LossWeights.from_config(config),
            schedule=LifecycleSchedule.from_config(config),
            resolution=config.get("render.resolution"),
            seed=config.get("run.seed"),
            finetune_latents=config.get("train.finetune_latents"),
            latent_lr=config.get("train.latent_lr"),
            checkpoint_every=config.get("train.checkpoint_every"),
            on_nonfinite=config.get("train.on_nonfinite"),
            progress=config.get("train.progress"),
            threads=config.get("run.threads"),
            background=tuple(config.get("render.background")),
            dtype=config.get("render.dtype"),
            extractor=config.get("loss.extractor"),
            extractor_seed=config.get("loss.extractor_seed"),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["weights"] = LossWeights(**data["weights"])
        data["schedule"] = LifecycleSchedule(**data["schedule"])
        for key in ("betas", "lr_decay_epochs", "flame_decay_epochs", "background"):
            data[key] = tuple(data[key])
        return cls(**data)

    def with_changes(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def lr_at_epoch(epoch: int, config: Optional[TrainConfig] = None) -> float:
    """減衰エポックを過ぎるごとに lr_decay 倍した学習率"""
    config = config or TrainConfig()
    decays = sum(1 for landmark in config.lr_decay_epochs if epoch >= landmark)
    return config.lr * config.lr_decay ** decays


def flame_weight_at_epoch(epoch: int, config: Optional[TrainConfig] = None) -> float:
    """λ_flame に掛ける倍率"""
    config = config or TrainConfig()
    decays = sum(1 for landmark in config.flame_decay_epochs if epoch >= landmark)
    return config.flame_decay ** decays


# ---------------------------------------------------------------------------
# 状態
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """
    学習状態

    点の位置は "points.means" としてフィールドと同じストアに置く。
    フレーム係数を学習する場合は latent_store に "latent.<frame>.theta/psi" を置く。
    """
    config: TrainConfig
    rig: RigDefinition
    template: RigTemplate
    fields: FieldBundle
    rng: np.random.Generator
    epoch: int = 0
    latent_store: ParameterStore = field(default_factory=ParameterStore)

    @property
    def store(self) -> ParameterStore:
        return self.fields.store

    @property
    def points(self) -> np.ndarray:
        return self.store[POINTS]

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])

    def schedule_entry(self, epoch: Optional[int] = None) -> ScheduleEntry:
        """指定エポック（省略時は最後に終えたエポック）の予定"""
        if epoch is None:
            epoch = max(self.epoch - 1, 0)
        return self.config.schedule.at_epoch(epoch)

    def rendering_radius(self, epoch: Optional[int] = None) -> float:
        if not self.config.schedule.enabled:
            return 0.0
        return self.schedule_entry(epoch).rendering_radius

    def frame_latents(self, frame: FrameRecord) -> PoseExpression:
        theta_name, psi_name = latent_names(frame.index)
        if theta_name in self.latent_store:
            return PoseExpression(theta=self.latent_store[theta_name].copy(), psi=self.latent_store[psi_name].copy())
        return frame.latents


def latent_names(index: int) -> Tuple[str, str]:
    return f"latent.{index:04d}.theta", f"latent.{index:04d}.psi"


def init_state(
    config: TrainConfig,
    rig: RigDefinition,
    template: RigTemplate,
    field_config: Optional[FieldConfig] = None,
    frames: Sequence[FrameRecord] = (),
) -> TrainState:
    """
    乱数生成器・フィールド・初期点を用意する

    Args:
        config: 学習設定
        rig: リグ
        template: 疑似正解用のテンプレート
        field_config: フィールド構成
        frames: 学習フレーム（係数を学習する場合に葉として登録する）

    Returns:
        TrainState
    """
    rng = np.random.default_rng(config.seed)
    fields = FieldBundle(rig.n_joints, rig.n_expressions, field_config)
    fields.initialize(rng)
    fields.store.add(POINTS, initial_points(config.schedule, rng))
    state = TrainState(config=config, rig=rig, template=template, fields=fields, rng=rng)
    if config.finetune_latents:
        for frame in frames:
            theta_name, psi_name = latent_names(frame.index)
            state.latent_store.add(theta_name, frame.latents.theta)
            state.latent_store.add(psi_name, frame.latents.psi)
    logger.info("学習状態を初期化しました: 点数 %d, パラメータ %d 個", state.n_points, len(state.store.names()))
    return state


# ---------------------------------------------------------------------------
# 1フレーム
# ---------------------------------------------------------------------------

@dataclass
class FrameStep:
    """1フレーム分の学習結果"""
    frame: int
    parts: LossParts
    total: float
    psnr: float
    opacity: Optional[np.ndarray] = None
    first_hits: Optional[np.ndarray] = None
    skipped: bool = False


def _param_grads(grads: RenderGrads) -> ParamBlock:
    return ParamBlock(
        rotations=grads.rotations, scales=grads.scales, opacities=grads.opacities, colors=grads.colors,
    )


def psnr(pred: np.ndarray, target: np.ndarray, cap: float = PSNR_CAP) -> float:
    """[0, 1] 画像の PSNR（上限 cap dB）"""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, -10.0 * np.log10(mse))


def train_step(
    state: TrainState,
    frame: FrameRecord,
    target: np.ndarray,
    lr: float,
    flame_multiplier: float,
    rendering_radius: float,
    extractor: Optional[FeatureExtractor] = None,
) -> FrameStep:
    """
    1フレームで1回 Adam を進める

    Raises:
        NonFiniteError: 損失・勾配が有限でなく on_nonfinite が abort の場合
    """
    cfg = state.config
    pose = state.frame_latents(frame)
    cloud, deform_tape = deform_cloud(state.points, state.fields, pose, state.rig)
    image, render_tape = render_fast(cloud, frame.camera, cfg.background, rendering_radius, cfg.threads, cfg.dtype)

    parts, grad_image = image_losses(image, target, cfg.weights, extractor)
    x_o = deform_tape.x_c + state.fields.config.offset_cap * deform_tape.offset_tape.squashed
    pseudo = pseudo_ground_truth(x_o, state.template)
    parts.flame, grad_template = flame_reg_loss(deform_tape.template, pseudo, cfg.weights)
    flame_scale = cfg.weights.lambda_flame * flame_multiplier
    for name in ("expr_bases", "pose_bases", "skin_weights"):
        setattr(grad_template, name, flame_scale * getattr(grad_template, name))
    total = total_loss(parts, cfg.weights, flame_multiplier)
    diagnostics = {"epoch": state.epoch, "frame": frame.index, "total": total, **parts.as_dict()}

    if not np.isfinite(total):
        if cfg.on_nonfinite == "abort":
            raise NonFiniteError(f"フレーム {frame.index} で損失が有限ではありません: {total}", diagnostics)
        logger.warning("フレーム %d の損失が有限でないため更新をスキップします", frame.index)
        state.store.zero_grad()
        return FrameStep(frame=frame.index, parts=parts, total=total, psnr=float("nan"), skipped=True)

    render_grads = render_backward(render_tape, grad_image)
    grads = deform_backward(deform_tape, state.fields, render_grads.means, _param_grads(render_grads), grad_template)
    state.store.accumulate(POINTS, grads.x_c)
    try:
        applied = adam_step(state.store, lr, cfg.betas, on_nonfinite=cfg.on_nonfinite)
        if cfg.finetune_latents:
            theta_name, psi_name = latent_names(frame.index)
            if theta_name in state.latent_store:
                state.latent_store.accumulate(theta_name, grads.theta)
                state.latent_store.accumulate(psi_name, grads.psi)
                adam_step(state.latent_store, cfg.latent_lr, cfg.betas, on_nonfinite=cfg.on_nonfinite)
    except NonFiniteError as e:
        raise NonFiniteError(str(e), {**diagnostics, **e.diagnostics})

    return FrameStep(
        frame=frame.index,
        parts=parts,
        total=total,
        psnr=psnr(image, target),
        opacity=cloud.activated_opacities()[:, 0],
        first_hits=render_tape.first_hits,
        skipped=not applied,
    )


# ---------------------------------------------------------------------------
# エポック
# ---------------------------------------------------------------------------

@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    n_points: int
    lr: float
    flame_multiplier: float
    entry: ScheduleEntry
    rows: List[Dict[str, object]] = field(default_factory=list)

    def schedule_row(self, strategy: str) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "n_points": self.n_points,
            "sampling_radius": self.entry.sampling_radius,
            "rendering_radius": self.entry.rendering_radius,
            "strategy": strategy,
        }


def _target_image(frame: FrameRecord) -> np.ndarray:
    image, error = frame.load()
    if error:
        raise OSError(error)
    return image


def train_epoch(
    state: TrainState,
    frames: Sequence[FrameRecord],
    extractor: Optional[FeatureExtractor] = None,
) -> EpochSummary:
    """
    1エポック分の学習

    フレーム順は実行シードの乱数で毎エポック並べ替える。終了時に点の削除と
    アップサンプリングを行い、点数をそのエポックの目標点数にそろえる。

    Args:
        state: 学習状態（その場で更新する）
        frames: 学習フレーム
        extractor: 知覚損失の特徴抽出器

    Returns:
        EpochSummary
    """
    cfg = state.config
    schedule = cfg.schedule
    epoch = state.epoch
    entry = schedule.at_epoch(epoch)
    schedule_epoch = schedule.schedule_epoch(epoch)
    lr = lr_at_epoch(schedule_epoch, cfg)
    flame_multiplier = flame_weight_at_epoch(schedule_epoch, cfg)
    radius = state.rendering_radius(epoch)

    n = state.n_points
    opacity_sum = np.zeros(n)
    first_hits = np.zeros(n, dtype=np.int64)
    counted = 0
    losses = []
    rows = []
    order = state.rng.permutation(len(frames))
    for position in tqdm(order, desc=f"エポック {epoch}", leave=False, disable=not cfg.progress):
        frame = frames[int(position)]
        step = train_step(state, frame, _target_image(frame), lr, flame_multiplier, radius, extractor)
        if step.opacity is not None:
            opacity_sum += step.opacity
            first_hits += step.first_hits
            counted += 1
        if np.isfinite(step.total):
            losses.append(step.total)
        rows.append({
            "epoch": epoch, "frame": frame.index, **step.parts.as_dict(),
            "total": step.total, "psnr": step.psnr, "n_points": n,
        })

    if schedule.enabled and counted > 0:
        result = end_of_epoch(
            state.points, epoch, schedule, state.rng,
            mean_opacity=opacity_sum / counted, first_hits=first_hits,
        )
        state.store.reindex_rows(POINTS, result.keep, result.points[result.keep.size:])

    state.epoch += 1
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    logger.info(
        "エポック %d: 平均損失 %.6f, 学習率 %.3g, 点数 %d -> %d",
        epoch, mean_loss, lr, n, state.n_points,
    )
    return EpochSummary(
        epoch=epoch, mean_loss=mean_loss, n_points=state.n_points, lr=lr,
        flame_multiplier=flame_multiplier, entry=entry, rows=rows,
    )


def fit(
    state: TrainState,
    frames: Sequence[FrameRecord],
    out_dir: str,
    extractor: Optional[FeatureExtractor] = None,
) -> List[EpochSummary]:
    """
    state.epoch から config.epochs まで学習し、ログとチェックポイントを書き出す

    out_dir には metrics.csv・schedule.csv（追記）、checkpoint_%04d.npz（定期）、
    checkpoint.npz（最終）を書く。数値異常で止まった場合は diagnostics.npz を残す。

    Raises:
        NonFiniteError: 数値異常
        OSError: 書き出しの失敗
    """
    cfg = state.config
    out = Path(out_dir)
    if extractor is None and cfg.weights.lambda_vgg > 0.0:
        extractor = make_extractor(cfg.extractor, cfg.extractor_seed)
    summaries = []
    for _ in tqdm(range(state.epoch, cfg.epochs), desc="学習", disable=not cfg.progress):
        try:
            summary = train_epoch(state, frames, extractor)
        except NonFiniteError as e:
            error = save_checkpoint(state, str(out / "diagnostics.npz"), extra={"diagnostics": e.diagnostics})
            if error:
                logger.error("診断情報を保存できませんでした: %s", error)
            raise
        summaries.append(summary)
        for error in (
            FileHandler.save_rows(summary.rows, str(out / "metrics.csv"), append=True),
            FileHandler.save_rows([summary.schedule_row(cfg.schedule.strategy)], str(out / "schedule.csv"), append=True),
        ):
            if error:
                raise OSError(error)
        if cfg.checkpoint_every > 0 and state.epoch % cfg.checkpoint_every == 0:
            error = save_checkpoint(state, str(out / f"checkpoint_{state.epoch:04d}.npz"))
            if error:
                raise OSError(error)

    error = save_checkpoint(state, str(out / "checkpoint.npz"))
    if error:
        raise OSError(error)
    return summaries


# ---------------------------------------------------------------------------
# 描画・微調整・評価
# ---------------------------------------------------------------------------

def deformed_cloud(state: TrainState, pose: PoseExpression) -> GaussianCloud:
    cloud, _ = deform_cloud(state.points, state.fields, pose, state.rig)
    return cloud


def export_cloud(state: TrainState, pose: Optional[PoseExpression] = None, canonical: bool = False) -> GaussianCloud:
    """書き出し用の点群（変形空間、または canonical=True でカノニカル空間）"""
    if canonical:
        return canonical_cloud(state.points, state.fields)
    pose = pose or PoseExpression.zeros(state.rig.n_joints, state.rig.n_expressions)
    return deformed_cloud(state, pose)


def render_frame(
    state: TrainState,
    camera: Camera,
    pose: PoseExpression,
    oracle: bool = False,
) -> np.ndarray:
    """学習済みモデルで1枚描画する（oracle=True で検証用レンダラ）"""
    cfg = state.config
    cloud = deformed_cloud(state, pose)
    radius = state.rendering_radius()
    if oracle:
        return render_oracle(cloud, camera, cfg.background, radius)
    image, _ = render_fast(cloud, camera, cfg.background, radius, cfg.threads, cfg.dtype)
    return image


def finetune_frame_latents(
    state: TrainState,
    frames: Sequence[FrameRecord],
    steps: int,
    lr: float = 1e-3,
) -> List[PoseExpression]:
    """
    フィールドを固定し、RGB 損失のみでフレームごとの θ, ψ を Adam で合わせる

    途中の反復のうち損失が最小のものを返すため、初期値より悪くはならない。

    Args:
        state: 学習済みの状態（変更しない）
        frames: 対象フレーム
        steps: 反復回数（0 なら初期値をそのまま返す）
        lr: 学習率

    Returns:
        フレームごとの係数
    """
    cfg = state.config
    radius = state.rendering_radius()
    refined = []
    for frame in tqdm(frames, desc="係数の微調整", disable=not cfg.progress or steps <= 0):
        initial = state.frame_latents(frame)
        best = PoseExpression(theta=np.array(initial.theta, dtype=np.float64), psi=np.array(initial.psi, dtype=np.float64))
        if steps <= 0:
            refined.append(best)
            continue
        target = _target_image(frame)
        local = ParameterStore()
        local.add("theta", initial.theta)
        local.add("psi", initial.psi)
        best_loss = np.inf
        for step in range(steps + 1):
            pose = PoseExpression(theta=local["theta"].copy(), psi=local["psi"].copy())
            cloud, deform_tape = deform_cloud(state.points, state.fields, pose, state.rig)
            image, render_tape = render_fast(cloud, frame.camera, cfg.background, radius, cfg.threads, cfg.dtype)
            loss, grad_image = rgb_loss(image, target)
            if loss < best_loss:
                best_loss, best = loss, pose
            if step == steps:
                break
            render_grads = render_backward(render_tape, grad_image)
            grads = deform_backward(deform_tape, state.fields, render_grads.means, _param_grads(render_grads))
            state.store.zero_grad()
            local.accumulate("theta", grads.theta)
            local.accumulate("psi", grads.psi)
            adam_step(local, lr, cfg.betas, on_nonfinite="skip")
        logger.debug("フレーム %d: 係数微調整後の RGB 損失 %.6f", frame.index, best_loss)
        refined.append(best)
    return refined


def image_metrics(pred: np.ndarray, target: np.ndarray) -> Dict[str, float]:
    """L1・PSNR・SSIM"""
    return {
        "l1": float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - target))),
        "psnr": psnr(pred, target),
        "ssim": ssim(pred, target)[0],
    }


@dataclass
class EvalResult:
    rows: List[Dict[str, object]]
    means: Dict[str, float]


def evaluate(
    state: TrainState,
    frames: Sequence[FrameRecord],
    latents: Optional[Sequence[PoseExpression]] = None,
) -> EvalResult:
    """
    フレームごとの L1・PSNR・SSIM とその平均

    Args:
        state: 学習済みの状態
        frames: 評価フレーム
        latents: フレームごとの係数（省略時はフレームの係数）
    """
    rows = []
    for i, frame in enumerate(frames):
        pose = latents[i] if latents is not None else state.frame_latents(frame)
        image = render_frame(state, frame.camera, pose)
        rows.append({"frame": frame.index, **image_metrics(image, _target_image(frame))})
    means = {key: float(np.mean([row[key] for row in rows])) if rows else float("nan") for key in ("l1", "psnr", "ssim")}
    return EvalResult(rows=rows, means=means)


# ---------------------------------------------------------------------------
# チェックポイント
# ---------------------------------------------------------------------------

def _store_arrays(store: ParameterStore, prefix: str) -> Dict[str, np.ndarray]:
    arrays = {}
    for name in store.names():
        arrays[f"{prefix}/{name}"] = store.values[name]
        arrays[f"{prefix}_m/{name}"] = store.m[name]
        arrays[f"{prefix}_v/{name}"] = store.v[name]
    return arrays


def _restore_store(arrays: Dict[str, np.ndarray], prefix: str, step: int) -> ParameterStore:
    store = ParameterStore()
    marker = prefix + "/"
    for key in sorted(arrays):
        if not key.startswith(marker):
            continue
        name = key[len(marker):]
        store.add(name, arrays[key])
        store.m[name] = np.array(arrays[f"{prefix}_m/{name}"], dtype=np.float64)
        store.v[name] = np.array(arrays[f"{prefix}_v/{name}"], dtype=np.float64)
    store.step = step
    return store


def save_checkpoint(state: TrainState, path: str, extra: Optional[dict] = None) -> Optional[str]:
    """
    学習状態を保存する

    パラメータ・Adam モーメント・ステップ数・エポック・乱数状態・リグを含む。

    Returns:
        エラーメッセージ、または成功時None
    """
    header = {
        "epoch": state.epoch,
        "adam_step": state.store.step,
        "latent_step": state.latent_store.step,
        "n_points": state.n_points,
        "train_config": state.config.to_dict(),
        "fields": state.fields.describe(),
        "rig": state.rig.to_dict(),
        "template": state.template.to_dict(),
        "rng": state.rng.bit_generator.state,
    }
    if extra:
        header["extra"] = {key: _json_safe(value) for key, value in extra.items()}
    arrays = _store_arrays(state.store, "param")
    arrays.update(_store_arrays(state.latent_store, "latent"))
    return CheckpointFile.save(CheckpointData(header=header, arrays=arrays), path)


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value) if np.isfinite(value) else str(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def load_checkpoint(path: str) -> Tuple[Optional[TrainState], Optional[str]]:
    """
    save_checkpoint の逆

    Returns:
        (TrainState, エラーメッセージ)

    Raises:
        CheckpointError: バージョン不一致・破損
    """
    data, error = CheckpointFile.load(path)
    if error:
        return None, error
    header, arrays = data.header, data.arrays
    try:
        store = _restore_store(arrays, "param", int(header["adam_step"]))
        fields = FieldBundle.from_description(header["fields"], store)
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = header["rng"]
        state = TrainState(
            config=TrainConfig.from_dict(header["train_config"]),
            rig=RigDefinition.from_dict(header["rig"]),
            template=RigTemplate.from_dict(header["template"]),
            fields=fields,
            rng=rng,
            epoch=int(header["epoch"]),
            latent_store=_restore_store(arrays, "latent", int(header["latent_step"])),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"チェックポイントの内容が不正です: {path}: {e}")
    if POINTS not in state.store or state.n_points != int(header["n_points"]):
        raise CheckpointError(f"チェックポイントの点データが不正です: {path}")
    return state, None
