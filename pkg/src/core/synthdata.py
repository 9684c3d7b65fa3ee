#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
合成データモジュール

手続き的なミニリグ (MiniRig) と正解ガウス点群から、フレームごとの
姿勢・表情係数とカメラを作り、検証用レンダラで正解画像を生成する。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from src.core.deform import RigDefinition, RigTemplate, lbs_transform
from src.core.gaussian_cloud import Camera, GaussianCloud, PoseExpression, logit, sigmoid
from src.core.losses import nearest_vertex
from src.core.splat import render_oracle
from src.utils.file_handler import FileHandler


logger = logging.getLogger(__name__)

HEAD_AXES = np.array([0.35, 0.45, 0.40])
JOINT_NAMES = ("neck", "jaw", "eye")
JOINT_PARENTS = (-1, 0, 0)
REST_JOINTS = np.array([
    [0.0, -0.50, 0.0],
    [0.0, -0.05, 0.10],
    [0.12, 0.12, 0.30],
])
SKIN_THRESHOLD = 0.01
JAW = 1


@dataclass(frozen=True)
class SceneConfig:
    """合成シーンの構成"""
    seed: int = 42
    n_frames: int = 64
    n_heldout: int = 8
    width: int = 128
    height: int = 128
    n_gt_points: int = 2000
    n_template_vertices: int = 500
    n_expressions: int = 10
    gt_scale: float = 0.015
    gt_opacity: float = 0.9
    focal: float = 200.0
    distance: float = 2.5
    orbit_degrees: float = 25.0
    jaw_amplitude: float = 0.35
    expr_amplitude: float = 1.0
    mouth_darkening: float = 0.8
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_config(cls, config) -> "SceneConfig":
        return cls(
            seed=config.get("run.seed"),
            n_frames=config.get("data.n_frames"),
            n_heldout=config.get("data.n_heldout"),
            width=config.get("data.width"),
            height=config.get("data.height"),
            n_gt_points=config.get("data.n_gt_points"),
            n_template_vertices=config.get("data.n_template_vertices"),
            n_expressions=config.get("rig.n_expressions"),
            gt_scale=config.get("data.gt_scale"),
            gt_opacity=config.get("data.gt_opacity"),
            focal=config.get("data.focal"),
            distance=config.get("data.distance"),
            orbit_degrees=config.get("data.orbit_degrees"),
            jaw_amplitude=config.get("data.jaw_amplitude"),
            expr_amplitude=config.get("data.expr_amplitude"),
            mouth_darkening=config.get("data.mouth_darkening"),
            background=tuple(config.get("render.background")),
        )


@dataclass
class FrameRecord:
    """1フレーム分の画像パス・カメラ・係数"""
    index: int
    image_path: str
    camera: Camera
    latents: PoseExpression
    split: str = "train"
    image: Optional[np.ndarray] = None

    def load(self) -> Tuple[Optional[np.ndarray], Optional[str]]:
        if self.image is None:
            image, error = FileHandler.load_image(self.image_path)
            if error:
                return None, error
            if image.shape[:2] != (self.camera.height, self.camera.width):
                return None, f"画像 {self.image_path} の解像度 {image.shape[:2]} がカメラと一致しません"
            self.image = image
        return self.image, None


@dataclass
class MiniRig:
    rig: RigDefinition
    template: RigTemplate


@dataclass
class SyntheticScene:
    """正解リグ・正解点群・フレーム列"""
    config: SceneConfig
    minirig: MiniRig
    gt_cloud: GaussianCloud
    gt_vertex: np.ndarray       # 点ごとの割り当て頂点
    latents: List[PoseExpression] = field(default_factory=list)
    cameras: List[Camera] = field(default_factory=list)
    splits: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# リグ
# ---------------------------------------------------------------------------

def ellipsoid_lattice(n: int) -> np.ndarray:
    """フィボナッチ格子で楕円体表面に n 点を置く"""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = np.pi * (1.0 + 5.0 ** 0.5) * i
    unit = np.stack([np.cos(azimuth) * np.sin(polar), np.cos(polar), np.sin(azimuth) * np.sin(polar)], axis=1)
    return unit * HEAD_AXES


def jaw_weight(points: np.ndarray) -> np.ndarray:
    """顎領域（前方下部）のなめらかな重み"""
    below = np.clip((-0.05 - points[:, 1]) / 0.15, 0.0, 1.0)
    front = np.clip((points[:, 2] + 0.1) / 0.2, 0.0, 1.0)
    return below * front


def skinning_weights(points: np.ndarray) -> np.ndarray:
    """首・顎・目の3関節の重み（0.01 未満は切り捨てて再正規化）"""
    jaw = jaw_weight(points)
    eye = 0.8 * np.exp(-np.sum((points - REST_JOINTS[2]) ** 2, axis=1) / (2.0 * 0.06 ** 2))
    neck = np.clip(1.0 - jaw - eye, 0.0, None) + 1e-3
    weights = np.stack([neck, jaw, eye], axis=1)
    weights /= weights.sum(axis=1, keepdims=True)
    weights[weights < SKIN_THRESHOLD] = 0.0
    return weights / weights.sum(axis=1, keepdims=True)


def pose_corrective_weights(points: np.ndarray) -> np.ndarray:
    """顎の姿勢補正基底の強さ（スキニングで顎に付かない点は 0）"""
    skin = skinning_weights(points)
    return np.where(skin[:, JAW] > 0.0, jaw_weight(points), 0.0)


def build_minirig(seed: int = 42, n_vertices: int = 500, n_expressions: int = 10) -> MiniRig:
    """
    ミニリグを作る

    3関節（首・顎・目）の木、ガウス減衰の表情基底、楕円体上のテンプレート頂点。

    Args:
        seed: 乱数シード
        n_vertices: テンプレート頂点数
        n_expressions: 表情基底数

    Returns:
        MiniRig
    """
    rng = np.random.default_rng(seed)
    vertices = ellipsoid_lattice(n_vertices)
    n_joints = len(JOINT_NAMES)

    # 顔の前面に中心を置いたガウス減衰の変位
    front = vertices[vertices[:, 2] > 0.1]
    centers = front[rng.choice(front.shape[0], size=n_expressions, replace=False)]
    directions = rng.normal(size=(n_expressions, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    distance_sq = np.sum((vertices[:, None, :] - centers[None]) ** 2, axis=2)
    falloff = np.exp(-distance_sq / (2.0 * 0.1 ** 2))
    expr_bases = 0.02 * falloff[:, :, None] * directions[None]

    pose_dim = 9 * (n_joints - 1)
    pose_directions = rng.normal(size=(pose_dim, 3))
    pose_bases = 0.005 * pose_corrective_weights(vertices)[:, None, None] * pose_directions[None]

    regressor = 0.01 * rng.normal(size=(n_joints, 3, n_expressions))
    regressor[0] = 0.0

    rig = RigDefinition(
        joint_names=JOINT_NAMES,
        parents=JOINT_PARENTS,
        rest_joints=REST_JOINTS.copy(),
        joint_regressor=regressor,
    )
    template = RigTemplate(
        vertices=vertices,
        expr_bases=expr_bases,
        pose_bases=pose_bases,
        skin_weights=skinning_weights(vertices),
    )
    return MiniRig(rig=rig, template=template)


# ---------------------------------------------------------------------------
# 正解点群
# ---------------------------------------------------------------------------

def procedural_colors(points: np.ndarray) -> np.ndarray:
    """位置のなめらかな関数としての色（目の付近は暗くする）"""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    colors = np.stack([
        0.62 + 0.22 * np.sin(3.0 * x + 0.5),
        0.45 + 0.18 * np.cos(4.0 * y),
        0.36 + 0.18 * np.sin(2.5 * z + 1.0),
    ], axis=1)
    eye = np.exp(-np.sum((points - REST_JOINTS[2]) ** 2, axis=1) / (2.0 * 0.04 ** 2))
    mirror = REST_JOINTS[2] * np.array([-1.0, 1.0, 1.0])
    eye += np.exp(-np.sum((points - mirror) ** 2, axis=1) / (2.0 * 0.04 ** 2))
    colors *= (1.0 - 0.8 * np.clip(eye, 0.0, 1.0))[:, None]
    return np.clip(colors, 0.02, 0.98)


def sample_gt_cloud(
    minirig: MiniRig,
    n_points: int = 2000,
    seed: int = 42,
    scale: float = 0.015,
    opacity: float = 0.9,
) -> Tuple[GaussianCloud, np.ndarray]:
    """
    テンプレート表面上の正解点群

    Returns:
        (カノニカル点群, 点ごとの最近傍テンプレート頂点)
    """
    if n_points <= 0:
        raise ValueError(f"点数は正である必要があります: {n_points}")
    rng = np.random.default_rng(seed + 1)
    directions = rng.normal(size=(n_points, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * HEAD_AXES

    rotations = rng.normal(size=(n_points, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    vertex = nearest_vertex(means, minirig.template.vertices)
    cloud = GaussianCloud(
        means=means,
        rotations=rotations,
        scales=np.full((n_points, 3), np.log(scale)),
        opacities=np.full((n_points, 1), float(logit(np.array(opacity)))),
        colors=logit(procedural_colors(means)),
        space_tag="canonical",
    )
    return cloud, vertex


def deform_gt_cloud(scene: SyntheticScene, latents: PoseExpression) -> GaussianCloud:
    """
    正解点群を LBS で変形し、顎の開きに比例して口元の色を暗くする
    """
    template = scene.minirig.template
    cloud = scene.gt_cloud
    v = scene.gt_vertex
    means, _ = lbs_transform(
        cloud.means, template.expr_bases[v], template.pose_bases[v], template.skin_weights[v],
        latents.theta, latents.psi, scene.minirig.rig,
    )
    amplitude = max(scene.config.jaw_amplitude, 1e-12)
    opening = min(float(np.linalg.norm(latents.theta[JAW])) / amplitude, 1.0)
    mouth = template.skin_weights[v, JAW]
    colors = sigmoid(cloud.colors) * (1.0 - scene.config.mouth_darkening * opening * mouth)[:, None]
    return cloud.with_changes(means=means, colors=logit(np.clip(colors, 1e-4, 1.0 - 1e-4)), space_tag="deformed")


# ---------------------------------------------------------------------------
# フレーム
# ---------------------------------------------------------------------------

def frame_latents(config: SceneConfig, n_joints: int, rng: np.random.Generator) -> Tuple[List[PoseExpression], List[str]]:
    """
    学習フレームのなめらかな軌跡と、新規姿勢の評価フレーム

    フレーム 0 は静止姿勢。
    """
    n = config.n_frames
    t = np.arange(n) / max(n, 1)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3 + config.n_expressions)
    freq = rng.integers(1, 4, size=3 + config.n_expressions)
    latents = []
    for i in range(n):
        theta = np.zeros((n_joints, 3))
        theta[0, 0] = 0.15 * np.sin(2.0 * np.pi * freq[0] * t[i] + phase[0])
        theta[0, 1] = 0.20 * np.sin(2.0 * np.pi * freq[1] * t[i] + phase[1])
        theta[JAW, 0] = config.jaw_amplitude * 0.5 * (1.0 - np.cos(2.0 * np.pi * freq[2] * t[i]))
        psi = 0.5 * config.expr_amplitude * np.sin(2.0 * np.pi * freq[3:] * t[i] + phase[3:])
        if i == 0:
            theta[:] = 0.0
            psi[:] = 0.0
        latents.append(PoseExpression(theta=theta, psi=psi))
    splits = ["train"] * n

    for _ in range(config.n_heldout):
        theta = np.zeros((n_joints, 3))
        theta[0, :2] = rng.uniform(-0.15, 0.15, size=2)
        theta[JAW, 0] = rng.uniform(0.0, config.jaw_amplitude)
        psi = rng.uniform(-0.5, 0.5, size=config.n_expressions) * config.expr_amplitude
        latents.append(PoseExpression(theta=theta, psi=psi))
        splits.append("heldout")
    return latents, splits


def orbit_cameras(config: SceneConfig, n: int) -> List[Camera]:
    """頭のまわりを左右に振るカメラ（フレーム 0 は正面）"""
    cameras = []
    for i in range(n):
        yaw = np.deg2rad(config.orbit_degrees) * np.sin(2.0 * np.pi * i / max(n, 1))
        eye = config.distance * np.array([np.sin(yaw), 0.08, np.cos(yaw)])
        cameras.append(Camera.look_at(
            eye, width=config.width, height=config.height, focal=config.focal,
        ))
    return cameras


def build_scene(config: SceneConfig) -> SyntheticScene:
    """シードと構成から合成シーン全体を組み立てる"""
    minirig = build_minirig(config.seed, config.n_template_vertices, config.n_expressions)
    gt_cloud, gt_vertex = sample_gt_cloud(minirig, config.n_gt_points, config.seed, config.gt_scale, config.gt_opacity)
    rng = np.random.default_rng(config.seed + 2)
    latents, splits = frame_latents(config, minirig.rig.n_joints, rng)
    scene = SyntheticScene(
        config=config, minirig=minirig, gt_cloud=gt_cloud, gt_vertex=gt_vertex,
        latents=latents, cameras=orbit_cameras(config, len(latents)), splits=splits,
    )
    return scene


def render_gt_frame(scene: SyntheticScene, index: int) -> np.ndarray:
    """正解画像（検証用レンダラ、倍精度）"""
    cloud = deform_gt_cloud(scene, scene.latents[index])
    return render_oracle(cloud, scene.cameras[index], scene.config.background)


@dataclass
class Dataset:
    """読み込み済みのデータセット"""
    root: Path
    rig: RigDefinition
    template: RigTemplate
    frames: List[FrameRecord]
    meta: dict

    def split(self, name: str) -> List[FrameRecord]:
        if name == "all":
            return list(self.frames)
        return [frame for frame in self.frames if frame.split == name]


def generate_dataset(
    scene: SyntheticScene,
    out_dir: str,
    threads: int = 1,
    config_digest: str = "",
    progress: bool = True,
) -> Tuple[Optional[List[FrameRecord]], Optional[str]]:
    """
    データセットを書き出す

    frames/frame_%04d.png（8bit）と frames/frame_%04d.npy（float32）、cameras.json、
    latents.csv、rig.txt、meta.txt、gt_cloud.ply。

    Returns:
        (フレームレコード, エラーメッセージ)
    """
    root = Path(out_dir)
    try:
        (root / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return None, f"出力先を作成できません: {out_dir}: {e}"

    indices = range(len(scene.latents))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            images = list(tqdm(executor.map(lambda i: render_gt_frame(scene, i), indices),
                               total=len(scene.latents), desc="正解画像", disable=not progress))
    else:
        images = [render_gt_frame(scene, i) for i in tqdm(indices, desc="正解画像", disable=not progress)]

    records = []
    for i, image in enumerate(images):
        png = root / "frames" / f"frame_{i:04d}.png"
        for path in (png, png.with_suffix(".npy")):
            error = FileHandler.save_image(image, str(path))
            if error:
                return None, error
        records.append(FrameRecord(
            index=i, image_path=str(png.with_suffix(".npy")), camera=scene.cameras[i],
            latents=scene.latents[i], split=scene.splits[i], image=image,
        ))

    rig_text = {"rig": scene.minirig.rig.to_dict(), "template": scene.minirig.template.to_dict()}
    errors = [
        FileHandler.save_cameras(scene.cameras, str(root / "cameras.json")),
        FileHandler.save_latents(scene.latents, scene.splits, str(root / "latents.csv")),
        FileHandler.save_json(rig_text, str(root / "rig.txt")),
        FileHandler.save_ply(scene.gt_cloud, str(root / "gt_cloud.ply")),
        FileHandler.save_meta({
            "seed": scene.config.seed,
            "config_hash": config_digest,
            "n_frames": scene.config.n_frames,
            "n_heldout": scene.config.n_heldout,
            "width": scene.config.width,
            "height": scene.config.height,
            "n_gt_points": scene.gt_cloud.n_points,
            "background": ", ".join(str(v) for v in scene.config.background),
        }, str(root / "meta.txt")),
    ]
    for error in errors:
        if error:
            return None, error
    logger.info("データセットを書き出しました: %s (%d フレーム)", root, len(records))
    return records, None


def load_dataset(root_dir: str) -> Tuple[Optional[Dataset], Optional[str]]:
    """
    generate_dataset が書き出したディレクトリを読み込む（画像は遅延読み込み）
    """
    root = Path(root_dir)
    rig_data, error = FileHandler.load_json(str(root / "rig.txt"))
    if error:
        return None, error
    try:
        rig = RigDefinition.from_dict(rig_data["rig"])
        template = RigTemplate.from_dict(rig_data["template"])
    except (KeyError, ValueError) as e:
        return None, f"リグファイルの形式が不正です: {e}"

    cameras, error = FileHandler.load_cameras(str(root / "cameras.json"))
    if error:
        return None, error
    loaded, error = FileHandler.load_latents(str(root / "latents.csv"), rig.n_joints)
    if error:
        return None, error
    latents, splits = loaded
    meta, error = FileHandler.load_meta(str(root / "meta.txt"))
    if error:
        return None, error
    if len(cameras) != len(latents):
        return None, f"カメラ数 {len(cameras)} と係数の行数 {len(latents)} が一致しません"

    frames = []
    for i, (camera, latent, split) in enumerate(zip(cameras, latents, splits)):
        npy = root / "frames" / f"frame_{i:04d}.npy"
        path = npy if npy.exists() else npy.with_suffix(".png")
        frames.append(FrameRecord(index=i, image_path=str(path), camera=camera, latents=latent, split=split))
    return Dataset(root=root, rig=rig, template=template, frames=frames, meta=meta), None
