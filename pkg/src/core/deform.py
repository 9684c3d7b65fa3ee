#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
変形モジュール

ブレンドシェイプ変位と線形ブレンドスキニング (LBS) による
カノニカル空間から変形空間への写像と、リグの関節計算を提供する。
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from src.core.errors import ShapeMismatchError
from src.core.fields import FieldBundle, ParamBlock, TemplateOutput
from src.core.gaussian_cloud import GaussianCloud, PoseExpression


SMALL_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# 回転
# ---------------------------------------------------------------------------

def skew(v: np.ndarray) -> np.ndarray:
    """(N, 3) ベクトルから歪対称行列 (N, 3, 3) を作る"""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_to_matrices(aa: np.ndarray) -> np.ndarray:
    """
    ロドリゲスの公式で軸角 (N, 3) を回転行列 (N, 3, 3) に変換

    ||aa|| < 1e-8 では2次のテイラー展開 I + K + K²/2 を使う。
    """
    aa = np.asarray(aa, dtype=np.float64).reshape(-1, 3)
    angle = np.linalg.norm(aa, axis=1)
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    k = skew(aa)
    k2 = k @ k
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    return np.eye(3)[None] + a[:, None, None] * k + b[:, None, None] * k2


def axis_angle_to_matrix(aa: Sequence[float]) -> np.ndarray:
    """
    軸角ベクトルを回転行列に変換

    Args:
        aa: 回転軸 × 角度 [rad]

    Returns:
        3x3 回転行列
    """
    return axis_angle_to_matrices(np.asarray(aa, dtype=np.float64)[None])[0]


def axis_angle_backward(aa: np.ndarray, rotations: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """
    axis_angle_to_matrices の随伴

    Args:
        aa: 軸角 (N, 3)
        rotations: 順伝播の回転行列 (N, 3, 3)
        grad_rot: 回転行列に対する勾配 (N, 3, 3)

    Returns:
        軸角に対する勾配 (N, 3)
    """
    aa = np.asarray(aa, dtype=np.float64).reshape(-1, 3)
    angle_sq = np.sum(aa * aa, axis=1)
    small = np.sqrt(angle_sq) < SMALL_ANGLE
    k = skew(aa)
    eye = np.eye(3)
    grad = np.zeros_like(aa)
    for i in range(3):
        basis = skew(np.broadcast_to(eye[i], aa.shape))
        # ∂R/∂v_i = (v_i [v]x + [v x (I - R) e_i]x) R / ||v||²
        column = eye[None, :, i] - rotations[:, :, i]
        general = (aa[:, i, None, None] * k + skew(np.cross(aa, column)))
        general = general / np.where(small, 1.0, angle_sq)[:, None, None]
        general = general @ rotations
        taylor = basis + 0.5 * (basis @ k + k @ basis)
        derivative = np.where(small[:, None, None], taylor, general)
        grad[:, i] = np.sum(grad_rot * derivative, axis=(1, 2))
    return grad


# ---------------------------------------------------------------------------
# リグ
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigDefinition:
    """
    関節木と線形関節回帰器を持つリグ

    parents は位相順（parents[j] < j、根は -1）。
    """
    joint_names: Tuple[str, ...]
    parents: Tuple[int, ...]
    rest_joints: np.ndarray       # (J, 3)
    joint_regressor: np.ndarray   # (J, 3, E)

    def __post_init__(self):
        object.__setattr__(self, "rest_joints", np.asarray(self.rest_joints, dtype=np.float64))
        object.__setattr__(self, "joint_regressor", np.asarray(self.joint_regressor, dtype=np.float64))
        n = len(self.parents)
        if n == 0 or self.parents[0] != -1:
            raise ValueError("関節0は根（親 -1）である必要があります")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise ValueError(f"関節 {j} の親 {self.parents[j]} が不正です（位相順の木が必要）")
        if len(self.joint_names) != n:
            raise ValueError("関節名の数が関節数と一致しません")
        if self.rest_joints.shape != (n, 3) or not np.all(np.isfinite(self.rest_joints)):
            raise ValueError(f"rest_joints は有限な ({n}, 3) 配列である必要があります")
        if self.joint_regressor.ndim != 3 or self.joint_regressor.shape[:2] != (n, 3):
            raise ValueError(f"joint_regressor は ({n}, 3, E) 配列である必要があります")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_expressions(self) -> int:
        return int(self.joint_regressor.shape[2])

    @property
    def pose_feature_dim(self) -> int:
        return 9 * (self.n_joints - 1)

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "rest_joints": self.rest_joints.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RigDefinition":
        return cls(
            joint_names=tuple(data["joint_names"]),
            parents=tuple(int(p) for p in data["parents"]),
            rest_joints=np.asarray(data["rest_joints"], dtype=np.float64),
            joint_regressor=np.asarray(data["joint_regressor"], dtype=np.float64),
        )


@dataclass(frozen=True)
class RigTemplate:
    """リグのテンプレート頂点と頂点ごとの基底・スキニング重み（疑似正解の元）"""
    vertices: np.ndarray      # (V, 3)
    expr_bases: np.ndarray    # (V, E, 3)
    pose_bases: np.ndarray    # (V, 9(J-1), 3)
    skin_weights: np.ndarray  # (V, J)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "expr_bases": self.expr_bases.tolist(),
            "pose_bases": self.pose_bases.tolist(),
            "skin_weights": self.skin_weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RigTemplate":
        return cls(**{key: np.asarray(data[key], dtype=np.float64) for key in
                      ("vertices", "expr_bases", "pose_bases", "skin_weights")})


def joint_locations(rig: RigDefinition, psi: np.ndarray) -> np.ndarray:
    """
    関節回帰器 J(ψ)

    Args:
        rig: リグ
        psi: 表情係数 (E,)

    Returns:
        関節位置 (J, 3)
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (rig.n_expressions,):
        raise ShapeMismatchError(f"psi の長さ {psi.shape} が表情基底数 {rig.n_expressions} と一致しません")
    return rig.rest_joints + np.einsum("jce,e->jc", rig.joint_regressor, psi)


def forward_kinematics(
    rig: RigDefinition,
    joints: np.ndarray,
    local_rotations: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    関節木をたどってワールド回転と関節のワールド位置を求める

    Returns:
        (ワールド回転 (J, 3, 3), ワールド位置 (J, 3))
    """
    n = rig.n_joints
    world_rot = np.empty((n, 3, 3))
    world_pos = np.empty((n, 3))
    world_rot[0] = local_rotations[0]
    world_pos[0] = joints[0]
    for j in range(1, n):
        p = rig.parents[j]
        world_rot[j] = world_rot[p] @ local_rotations[j]
        world_pos[j] = world_rot[p] @ (joints[j] - joints[p]) + world_pos[p]
    return world_rot, world_pos


def pose_features(local_rotations: np.ndarray) -> np.ndarray:
    """根以外の関節の (R - I) を平坦化した姿勢補正入力"""
    return (local_rotations[1:] - np.eye(3)[None]).reshape(-1)


@dataclass
class LbsTape:
    x_shaped: np.ndarray
    expr_bases: np.ndarray
    pose_bases: np.ndarray
    skin_weights: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    joints: np.ndarray
    local_rot: np.ndarray
    world_rot: np.ndarray
    world_pos: np.ndarray
    offsets: np.ndarray
    blended_rot: np.ndarray
    features: np.ndarray
    rig: RigDefinition


@dataclass
class LbsGrads:
    x_o: np.ndarray
    expr_bases: np.ndarray
    pose_bases: np.ndarray
    skin_weights: np.ndarray
    theta: np.ndarray
    psi: np.ndarray


def lbs_transform(
    x_o: np.ndarray,
    expr_bases: np.ndarray,
    pose_bases: np.ndarray,
    skin_weights: np.ndarray,
    theta: np.ndarray,
    psi: np.ndarray,
    rig: RigDefinition,
) -> Tuple[np.ndarray, LbsTape]:
    """
    x_d = LBS(x_o + B_P(θ; P) + B_E(ψ; E), J(ψ), θ, W)

    Args:
        x_o: カノニカル位置 (N, 3)
        expr_bases: 表情基底 (N, E, 3)
        pose_bases: 姿勢補正基底 (N, 9(J-1), 3)
        skin_weights: スキニング重み (N, J)
        theta: 関節ごとの軸角 (J, 3)
        psi: 表情係数 (E,)
        rig: リグ

    Returns:
        (変形後の位置 (N, 3), テープ)
    """
    x_o = np.asarray(x_o, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    n = x_o.shape[0]
    expected = {
        "expr_bases": (expr_bases, (n, rig.n_expressions, 3)),
        "pose_bases": (pose_bases, (n, rig.pose_feature_dim, 3)),
        "skin_weights": (skin_weights, (n, rig.n_joints)),
        "theta": (theta, (rig.n_joints, 3)),
    }
    for name, (array, shape) in expected.items():
        if np.shape(array) != shape:
            raise ShapeMismatchError(f"{name} の形状 {np.shape(array)} は {shape} である必要があります")

    joints = joint_locations(rig, psi)
    local_rot = axis_angle_to_matrices(theta)
    features = pose_features(local_rot)
    x_shaped = (
        x_o
        + np.einsum("k,nkc->nc", features, pose_bases)
        + np.einsum("e,nec->nc", psi, expr_bases)
    )
    world_rot, world_pos = forward_kinematics(rig, joints, local_rot)
    offsets = world_pos - np.einsum("jab,jb->ja", world_rot, joints)

    blended_rot = np.einsum("nj,jab->nab", skin_weights, world_rot)
    x_d = np.einsum("nab,nb->na", blended_rot, x_shaped) + skin_weights @ offsets

    tape = LbsTape(
        x_shaped=x_shaped, expr_bases=np.asarray(expr_bases), pose_bases=np.asarray(pose_bases),
        skin_weights=np.asarray(skin_weights), theta=theta, psi=np.asarray(psi, dtype=np.float64),
        joints=joints, local_rot=local_rot, world_rot=world_rot, world_pos=world_pos,
        offsets=offsets, blended_rot=blended_rot, features=features, rig=rig,
    )
    return x_d, tape


def lbs_backward(tape: LbsTape, grad_xd: np.ndarray) -> LbsGrads:
    """
    lbs_transform の随伴

    Args:
        tape: lbs_transform のテープ
        grad_xd: 変形後の位置に対する勾配 (N, 3)

    Returns:
        各入力に対する勾配
    """
    rig = tape.rig
    g = np.asarray(grad_xd, dtype=np.float64)
    if g.shape != tape.x_shaped.shape:
        raise ShapeMismatchError(f"随伴の形状 {g.shape} が {tape.x_shaped.shape} と一致しません")
    w = tape.skin_weights
    x_s = tape.x_shaped

    grad_xs = np.einsum("nab,na->nb", tape.blended_rot, g)
    grad_w = np.einsum("na,jab,nb->nj", g, tape.world_rot, x_s) + g @ tape.offsets.T
    grad_world_rot = np.einsum("nj,na,nb->jab", w, g, x_s)
    grad_offsets = w.T @ g

    # offsets = world_pos - world_rot @ joints
    grad_world_pos = grad_offsets.copy()
    grad_world_rot -= np.einsum("ja,jb->jab", grad_offsets, tape.joints)
    grad_joints = -np.einsum("jab,ja->jb", tape.world_rot, grad_offsets)

    grad_local = np.zeros_like(tape.local_rot)
    for j in reversed(range(1, rig.n_joints)):
        p = rig.parents[j]
        rel = tape.joints[j] - tape.joints[p]
        grad_world_rot[p] += grad_world_rot[j] @ tape.local_rot[j].T + np.outer(grad_world_pos[j], rel)
        grad_local[j] += tape.world_rot[p].T @ grad_world_rot[j]
        moved = tape.world_rot[p].T @ grad_world_pos[j]
        grad_joints[j] += moved
        grad_joints[p] -= moved
        grad_world_pos[p] += grad_world_pos[j]
    grad_local[0] += grad_world_rot[0]
    grad_joints[0] += grad_world_pos[0]

    # ブレンドシェイプ
    grad_features = np.einsum("nc,nkc->k", grad_xs, tape.pose_bases)
    grad_pose_bases = tape.features[None, :, None] * grad_xs[:, None, :]
    grad_expr_bases = tape.psi[None, :, None] * grad_xs[:, None, :]
    grad_psi = np.einsum("nc,nec->e", grad_xs, tape.expr_bases)
    grad_psi += np.einsum("jce,jc->e", rig.joint_regressor, grad_joints)

    grad_local[1:] += grad_features.reshape(-1, 3, 3)
    grad_theta = axis_angle_backward(tape.theta, tape.local_rot, grad_local)

    return LbsGrads(
        x_o=grad_xs,
        expr_bases=grad_expr_bases,
        pose_bases=grad_pose_bases,
        skin_weights=grad_w,
        theta=grad_theta,
        psi=grad_psi,
    )


# ---------------------------------------------------------------------------
# 点群の変形
# ---------------------------------------------------------------------------

@dataclass
class DeformTape:
    x_c: np.ndarray
    predict_tape: object
    offset_tape: object
    template_tape: object
    lbs_tape: LbsTape
    deform_tape: object
    template: TemplateOutput
    canonical_params: ParamBlock


@dataclass
class DeformGrads:
    """deform_backward の結果（フィールド勾配はストアへ加算済み）"""
    x_c: np.ndarray
    theta: np.ndarray
    psi: np.ndarray


def canonical_cloud(points: np.ndarray, fields: FieldBundle) -> GaussianCloud:
    """初期化空間の点からカノニカル空間の点群を作る（書き出し用、テープなし）"""
    params, _ = fields.predict_canonical_params(points)
    x_o, _, _ = fields.canonical_offset(points)
    return GaussianCloud(
        means=x_o,
        rotations=params.rotations,
        scales=params.scales,
        opacities=params.opacities,
        colors=params.colors,
        space_tag="canonical",
    )


def deform_cloud(
    points: np.ndarray,
    fields: FieldBundle,
    pose: PoseExpression,
    rig: RigDefinition,
) -> Tuple[GaussianCloud, DeformTape]:
    """
    初期化空間の点を変形空間のガウス点群へ写す

    カノニカルパラメータ予測、オフセット、テンプレート問い合わせ、LBS、
    パラメータ変形の順に合成する。パラメータのオフセットは活性化前に加算する。

    Args:
        points: 初期化空間の位置 (N, 3)
        fields: 学習フィールド
        pose: フレームの姿勢・表情係数
        rig: リグ

    Returns:
        (変形後の点群, テープ)
    """
    pose.check(rig.n_joints, rig.n_expressions)
    x_c = np.asarray(points, dtype=np.float64)
    canonical, predict_tape = fields.predict_canonical_params(x_c)
    x_o, offset, offset_tape = fields.canonical_offset(x_c)
    template, template_tape = fields.query_template(x_o)
    x_d, lbs_tape = lbs_transform(
        x_o, template.expr_bases, template.pose_bases, template.skin_weights,
        pose.theta, pose.psi, rig,
    )
    offsets, deform_tape = fields.param_deformation(x_c, x_d, offset)
    deformed = canonical + offsets
    cloud = GaussianCloud(
        means=x_d,
        rotations=deformed.rotations,
        scales=deformed.scales,
        opacities=deformed.opacities,
        colors=deformed.colors,
        space_tag="deformed",
    )
    tape = DeformTape(
        x_c=x_c, predict_tape=predict_tape, offset_tape=offset_tape,
        template_tape=template_tape, lbs_tape=lbs_tape, deform_tape=deform_tape,
        template=template, canonical_params=canonical,
    )
    return cloud, tape


def deform_backward(
    tape: DeformTape,
    fields: FieldBundle,
    grad_means: np.ndarray,
    grad_params: ParamBlock,
    grad_template: Optional[TemplateOutput] = None,
) -> DeformGrads:
    """
    deform_cloud の随伴

    Args:
        tape: deform_cloud のテープ
        fields: 順伝播と同じフィールド
        grad_means: 変形後位置への勾配 (N, 3)
        grad_params: 変形後の活性化前パラメータへの勾配
        grad_template: テンプレート出力への追加勾配（FLAME 正則化など）

    Returns:
        x_c・θ・ψ への勾配
    """
    grad_xc, grad_xd_extra, grad_offset = fields.deformation_backward(tape.deform_tape, grad_params)
    lbs_grads = lbs_backward(tape.lbs_tape, np.asarray(grad_means, dtype=np.float64) + grad_xd_extra)

    template_grads = TemplateOutput(
        expr_bases=lbs_grads.expr_bases,
        pose_bases=lbs_grads.pose_bases,
        skin_weights=lbs_grads.skin_weights,
    )
    if grad_template is not None:
        template_grads.expr_bases = template_grads.expr_bases + grad_template.expr_bases
        template_grads.pose_bases = template_grads.pose_bases + grad_template.pose_bases
        template_grads.skin_weights = template_grads.skin_weights + grad_template.skin_weights
    grad_xo = lbs_grads.x_o + fields.template_backward(tape.template_tape, template_grads)

    grad_xc = grad_xc + fields.offset_backward(tape.offset_tape, grad_xo, grad_offset)
    grad_xc = grad_xc + fields.predict_backward(tape.predict_tape, grad_params)
    return DeformGrads(x_c=grad_xc, theta=lbs_grads.theta, psi=lbs_grads.psi)


# ---------------------------------------------------------------------------
# 総当たり LBS（検証用）
# ---------------------------------------------------------------------------

def lbs_explicit(
    x_o: np.ndarray,
    expr_bases: np.ndarray,
    pose_bases: np.ndarray,
    skin_weights: np.ndarray,
    theta: np.ndarray,
    psi: np.ndarray,
    rig: RigDefinition,
) -> np.ndarray:
    """4x4 の関節変換行列を明示的に組み立ててブレンドする LBS"""
    joints = joint_locations(rig, psi)
    local = axis_angle_to_matrices(theta)
    transforms = []
    for j in range(rig.n_joints):
        m = np.eye(4)
        m[:3, :3] = local[j]
        p = rig.parents[j]
        m[:3, 3] = joints[j] - (joints[p] if p >= 0 else 0.0)
        transforms.append(m if p < 0 else transforms[p] @ m)
    skinning = []
    for j in range(rig.n_joints):
        unpose = np.eye(4)
        unpose[:3, 3] = -joints[j]
        skinning.append(transforms[j] @ unpose)
    features = pose_features(local)
    out = np.empty_like(np.asarray(x_o, dtype=np.float64))
    for i in range(len(x_o)):
        shaped = x_o[i] + features @ pose_bases[i] + psi @ expr_bases[i]
        blended = sum(skin_weights[i, j] * skinning[j] for j in range(rig.n_joints))
        out[i] = (blended @ np.append(shaped, 1.0))[:3]
    return out
