#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
学習フィールドモジュール

ガウスパラメータ予測・カノニカルオフセット・ブレンドシェイプ/スキニング
テンプレート・パラメータ変形の4つの MLP フィールドを管理する。
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from src.core.autodiff import Mlp, MlpSpec, MlpTape, ParameterStore
from src.core.errors import ShapeMismatchError
from src.core.gaussian_cloud import logit


logger = logging.getLogger(__name__)

PARAM_DIM = 11
ROTATION_BIAS = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class ParamBlock:
    """
    点ごとの活性化前パラメータ（回転4 + スケール3 + 不透明度1 + 色3）
    """
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    @classmethod
    def from_array(cls, values: np.ndarray) -> "ParamBlock":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != PARAM_DIM:
            raise ShapeMismatchError(f"パラメータ配列の形状 {values.shape} は (N, {PARAM_DIM}) である必要があります")
        return cls(
            rotations=values[:, 0:4].copy(),
            scales=values[:, 4:7].copy(),
            opacities=values[:, 7:8].copy(),
            colors=values[:, 8:11].copy(),
        )

    @classmethod
    def zeros(cls, n: int) -> "ParamBlock":
        return cls.from_array(np.zeros((n, PARAM_DIM)))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rotations, self.scales, self.opacities, self.colors], axis=1)

    def __add__(self, other: "ParamBlock") -> "ParamBlock":
        return ParamBlock.from_array(self.as_array() + other.as_array())


@dataclass
class TemplateOutput:
    """テンプレート問い合わせ結果"""
    expr_bases: np.ndarray    # (N, E, 3)
    pose_bases: np.ndarray    # (N, 9(J-1), 3)
    skin_weights: np.ndarray  # (N, J)


@dataclass(frozen=True)
class FieldConfig:
    """フィールド構成"""
    hidden: int = 128
    depth: int = 3
    encoding_bands: int = 0
    offset_cap: float = 0.5
    initial_scale: float = 0.01
    initial_opacity: float = 0.5
    head_scale: float = 0.01
    deform_enabled: bool = True

    def __post_init__(self):
        if self.hidden < 1 or self.depth < 1:
            raise ValueError("hidden / depth は1以上である必要があります")
        if self.offset_cap <= 0.0:
            raise ValueError("offset_cap は正である必要があります")
        if self.initial_scale <= 0.0 or not 0.0 < self.initial_opacity < 1.0:
            raise ValueError("初期スケールは正、初期不透明度は (0, 1) である必要があります")

    @classmethod
    def from_config(cls, config) -> "FieldConfig":
        return cls(
            hidden=config.get("fields.hidden"),
            depth=config.get("fields.depth"),
            encoding_bands=config.get("fields.encoding_bands"),
            offset_cap=config.get("fields.offset_cap"),
            initial_scale=config.get("fields.initial_scale"),
            initial_opacity=config.get("fields.initial_opacity"),
            head_scale=config.get("fields.head_scale"),
            deform_enabled=config.get("fields.deform_enabled"),
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OffsetTape:
    mlp_tape: MlpTape
    squashed: np.ndarray   # tanh(raw / cap)


@dataclass
class TemplateTape:
    mlp_tape: MlpTape
    skin_weights: np.ndarray


@dataclass
class DeformFieldTape:
    mlp_tape: Optional[MlpTape]
    n_points: int


class FieldBundle:
    """
    4つの学習フィールドをまとめたもの

    パラメータはすべて1つの ParameterStore に置かれ、名前の接頭辞で区別する
    (predict / offset / template / deform)。
    """

    def __init__(
        self,
        n_joints: int,
        n_expressions: int,
        config: Optional[FieldConfig] = None,
        store: Optional[ParameterStore] = None,
    ):
        self.config = config or FieldConfig()
        self.n_joints = n_joints
        self.n_expressions = n_expressions
        self.pose_dim = 9 * (n_joints - 1)
        self.store = store if store is not None else ParameterStore()

        cfg = self.config
        common = dict(hidden=cfg.hidden, depth=cfg.depth, weight_norm=True)
        template_out = n_expressions * 3 + self.pose_dim * 3 + n_joints
        self.predict_net = Mlp(
            "predict",
            MlpSpec.build(3, PARAM_DIM, activation="softplus", encoding_bands=cfg.encoding_bands, **common),
            self.store,
        )
        self.offset_net = Mlp(
            "offset",
            MlpSpec.build(3, 3, activation="softplus", encoding_bands=cfg.encoding_bands,
                          output_scale=cfg.head_scale, **common),
            self.store,
        )
        self.template_net = Mlp(
            "template",
            MlpSpec.build(3, template_out, activation="softplus", encoding_bands=cfg.encoding_bands,
                          output_scale=cfg.head_scale, **common),
            self.store,
        )
        self.deform_net = Mlp(
            "deform",
            MlpSpec.build(9, PARAM_DIM, activation="relu", output_scale=cfg.head_scale, **common),
            self.store,
        )

    @property
    def networks(self) -> Dict[str, Mlp]:
        return {
            "predict": self.predict_net,
            "offset": self.offset_net,
            "template": self.template_net,
            "deform": self.deform_net,
        }

    def initialize(self, rng: np.random.Generator) -> None:
        """
        全ネットワークを初期化する

        予測ネットの最終バイアスは初期スケール・初期不透明度に合わせる。
        """
        for net in self.networks.values():
            net.initialize(rng)
        last = self.predict_net.spec.n_layers - 1
        bias = self.store[self.predict_net.param_name(last, "b")]
        bias[4:7] = np.log(self.config.initial_scale)
        bias[7] = float(logit(np.array(self.config.initial_opacity)))
        logger.debug("フィールド初期化: パラメータ %d 個", len(self.store.names()))

    def zero_outputs(self) -> None:
        """全ネットワークの出力をゼロにする（恒等変形のテスト用）"""
        for net in self.networks.values():
            net.zero_output()

    # ------------------------------------------------------------------
    # 予測ネット
    # ------------------------------------------------------------------

    def predict_canonical_params(self, x_c: np.ndarray) -> Tuple[ParamBlock, MlpTape]:
        """
        位置からカノニカルなガウスパラメータ（活性化前）を予測する

        Args:
            x_c: 位置 (N, 3)

        Returns:
            (パラメータ, テープ)
        """
        raw, tape = self.predict_net.forward(x_c)
        raw[:, 0:4] += ROTATION_BIAS
        return ParamBlock.from_array(raw), tape

    def predict_backward(self, tape: MlpTape, grads: ParamBlock) -> np.ndarray:
        return self.predict_net.backward(tape, grads.as_array())

    # ------------------------------------------------------------------
    # オフセットネット
    # ------------------------------------------------------------------

    def canonical_offset(self, x_c: np.ndarray) -> Tuple[np.ndarray, np.ndarray, OffsetTape]:
        """
        x_o = x_c + cap·tanh(F_off(x_c) / cap)

        Returns:
            (x_o, オフセット, テープ)
        """
        cap = self.config.offset_cap
        raw, mlp_tape = self.offset_net.forward(x_c)
        squashed = np.tanh(raw / cap)
        offset = cap * squashed
        return np.asarray(x_c, dtype=np.float64) + offset, offset, OffsetTape(mlp_tape, squashed)

    def offset_backward(self, tape: OffsetTape, grad_xo: np.ndarray, grad_offset: Optional[np.ndarray] = None) -> np.ndarray:
        total = np.asarray(grad_xo, dtype=np.float64)
        if grad_offset is not None:
            total = total + grad_offset
        grad_raw = total * (1.0 - tape.squashed ** 2)
        return grad_xo + self.offset_net.backward(tape.mlp_tape, grad_raw)

    # ------------------------------------------------------------------
    # テンプレートネット
    # ------------------------------------------------------------------

    def _split_template(self, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = raw.shape[0]
        e_end = self.n_expressions * 3
        p_end = e_end + self.pose_dim * 3
        return (
            raw[:, :e_end].reshape(n, self.n_expressions, 3),
            raw[:, e_end:p_end].reshape(n, self.pose_dim, 3),
            raw[:, p_end:],
        )

    def query_template(self, x_o: np.ndarray) -> Tuple[TemplateOutput, TemplateTape]:
        """
        表情基底・姿勢補正基底・スキニング重み（softmax）を返す
        """
        raw, mlp_tape = self.template_net.forward(x_o)
        expr, pose, logits = self._split_template(raw)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        weights = exp / exp.sum(axis=1, keepdims=True)
        out = TemplateOutput(expr_bases=expr, pose_bases=pose, skin_weights=weights)
        return out, TemplateTape(mlp_tape, weights)

    def template_backward(self, tape: TemplateTape, grads: TemplateOutput) -> np.ndarray:
        w = tape.skin_weights
        n = w.shape[0]
        grad_logits = w * (grads.skin_weights - np.sum(grads.skin_weights * w, axis=1, keepdims=True))
        grad_raw = np.concatenate(
            [grads.expr_bases.reshape(n, -1), grads.pose_bases.reshape(n, -1), grad_logits], axis=1
        )
        return self.template_net.backward(tape.mlp_tape, grad_raw)

    # ------------------------------------------------------------------
    # 変形ネット
    # ------------------------------------------------------------------

    def param_deformation(
        self, x_c: np.ndarray, x_d: np.ndarray, offset: np.ndarray
    ) -> Tuple[ParamBlock, DeformFieldTape]:
        """
        F_d(x_c, x_d, offset) によるパラメータオフセット（活性化前空間で加算）

        deform_enabled = false のときは常にゼロを返す（静的パラメータ）。
        """
        x_c = np.asarray(x_c, dtype=np.float64)
        if not (x_c.shape == np.shape(x_d) == np.shape(offset)):
            raise ShapeMismatchError("x_c / x_d / offset の形状が一致しません")
        n = x_c.shape[0]
        if not self.config.deform_enabled:
            return ParamBlock.zeros(n), DeformFieldTape(None, n)
        raw, mlp_tape = self.deform_net.forward(np.concatenate([x_c, x_d, offset], axis=1))
        return ParamBlock.from_array(raw), DeformFieldTape(mlp_tape, n)

    def deformation_backward(
        self, tape: DeformFieldTape, grads: ParamBlock
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Returns:
            (x_c, x_d, offset それぞれへの勾配)
        """
        if tape.mlp_tape is None:
            zeros = np.zeros((tape.n_points, 3))
            return zeros, zeros.copy(), zeros.copy()
        grad_in = self.deform_net.backward(tape.mlp_tape, grads.as_array())
        return grad_in[:, 0:3], grad_in[:, 3:6], grad_in[:, 6:9]

    # ------------------------------------------------------------------
    # 直列化
    # ------------------------------------------------------------------

    def describe(self) -> dict:
        """チェックポイントヘッダ用の構成記述"""
        return {
            "n_joints": self.n_joints,
            "n_expressions": self.n_expressions,
            "config": self.config.to_dict(),
            "networks": {name: net.spec.to_dict() for name, net in self.networks.items()},
        }

    @classmethod
    def from_description(cls, description: dict, store: ParameterStore) -> "FieldBundle":
        bundle = cls(
            n_joints=int(description["n_joints"]),
            n_expressions=int(description["n_expressions"]),
            config=FieldConfig(**description["config"]),
            store=store,
        )
        for name, net in bundle.networks.items():
            if net.spec.to_dict() != description["networks"][name]:
                raise ShapeMismatchError(f"ネットワーク {name} の構成がチェックポイントと一致しません")
        return bundle
