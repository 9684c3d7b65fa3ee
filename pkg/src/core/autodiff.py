#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
逆伝播モジュール

重み正規化 MLP の順伝播・逆伝播（層ごとの解析的随伴）と、
パラメータストアおよび Adam による更新を提供する。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from src.core.errors import NonFiniteError, ShapeMismatchError
from src.core.gaussian_cloud import sigmoid


logger = logging.getLogger(__name__)

WEIGHT_NORM_EPS = 1e-12
ACTIVATIONS = ("softplus", "relu", "sigmoid", "none")


# ---------------------------------------------------------------------------
# 活性化関数
# ---------------------------------------------------------------------------

def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    """
    活性化関数を適用する

    Args:
        x: 入力
        kind: softplus / relu / sigmoid / none

    Returns:
        同じ形状の出力
    """
    x = np.asarray(x, dtype=np.float64)
    if kind == "softplus":
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "none":
        return x.copy()
    raise ValueError(f"不明な活性化関数です: {kind}")


def activation_backward(x: np.ndarray, kind: str, grad_output: np.ndarray) -> np.ndarray:
    """activation_forward の入力に対する勾配"""
    if kind == "softplus":
        return grad_output * sigmoid(x)
    if kind == "relu":
        return grad_output * (x > 0.0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return grad_output * s * (1.0 - s)
    if kind == "none":
        return grad_output
    raise ValueError(f"不明な活性化関数です: {kind}")


# ---------------------------------------------------------------------------
# 重み正規化線形層
# ---------------------------------------------------------------------------

def weightnorm_weight(v: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    w = g * v / ||v|| を行ごとに計算する

    Returns:
        (重み行列, 安定化済みの行ノルム)
    """
    norms = np.maximum(np.linalg.norm(v, axis=1), WEIGHT_NORM_EPS)
    return g[:, None] * v / norms[:, None], norms


def linear_weightnorm_forward(x: np.ndarray, v: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    重み正規化線形層の順伝播

    Args:
        x: 入力 (..., in)
        v: 方向ベクトル (out, in)
        g: 行ごとのゲイン (out,)
        b: バイアス (out,)

    Returns:
        (g * v̂) x + b
    """
    if np.shape(x)[-1] != v.shape[1]:
        raise ShapeMismatchError(f"入力次元 {np.shape(x)[-1]} が層の入力次元 {v.shape[1]} と一致しません")
    weight, _ = weightnorm_weight(v, g)
    return np.asarray(x, dtype=np.float64) @ weight.T + b


def linear_weightnorm_backward(
    x: np.ndarray,
    v: np.ndarray,
    g: np.ndarray,
    grad_output: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    重み正規化線形層の逆伝播

    Args:
        x: 順伝播時の入力 (N, in)
        v, g: 層パラメータ
        grad_output: 出力に対する勾配 (N, out)

    Returns:
        (dx, dv, dg, db)
    """
    x2 = np.atleast_2d(x)
    dy = np.atleast_2d(grad_output)
    weight, norms = weightnorm_weight(v, g)
    unit = v / norms[:, None]

    grad_weight = dy.T @ x2
    grad_bias = dy.sum(axis=0)
    grad_input = (dy @ weight).reshape(np.shape(x))

    grad_gain = np.sum(grad_weight * unit, axis=1)
    grad_unit = g[:, None] * grad_weight
    grad_dir = (grad_unit - unit * np.sum(grad_unit * unit, axis=1, keepdims=True)) / norms[:, None]
    # ノルムがイプシロンで打ち切られた行は v に対して線形
    clamped = np.linalg.norm(v, axis=1) < WEIGHT_NORM_EPS
    if np.any(clamped):
        grad_dir[clamped] = grad_unit[clamped] / WEIGHT_NORM_EPS
    return grad_input, grad_dir, grad_gain, grad_bias


# ---------------------------------------------------------------------------
# 位置エンコーディング
# ---------------------------------------------------------------------------

def positional_encoding(x: np.ndarray, bands: int) -> np.ndarray:
    """[x, sin(2^k π x), cos(2^k π x)] を連結する（bands = 0 なら恒等）"""
    if bands <= 0:
        return x
    parts = [x]
    for k in range(bands):
        freq = (2.0 ** k) * np.pi
        parts.append(np.sin(freq * x))
        parts.append(np.cos(freq * x))
    return np.concatenate(parts, axis=-1)


def positional_encoding_backward(x: np.ndarray, bands: int, grad_output: np.ndarray) -> np.ndarray:
    if bands <= 0:
        return grad_output
    dim = x.shape[-1]
    grad = grad_output[..., :dim].copy()
    for k in range(bands):
        freq = (2.0 ** k) * np.pi
        offset = dim * (1 + 2 * k)
        grad += freq * np.cos(freq * x) * grad_output[..., offset:offset + dim]
        grad -= freq * np.sin(freq * x) * grad_output[..., offset + dim:offset + 2 * dim]
    return grad


# ---------------------------------------------------------------------------
# パラメータストア
# ---------------------------------------------------------------------------

class ParameterStore:
    """
    名前付きパラメータと勾配・Adam モーメントの保管庫
    """

    def __init__(self):
        self.values: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> List[str]:
        return sorted(self.values)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        """勾配を加算する"""
        buffer = self.grads[name]
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != buffer.shape:
            raise ShapeMismatchError(
                f"{name} の勾配形状 {grad.shape} がパラメータ形状 {buffer.shape} と一致しません"
            )
        buffer += grad

    def zero_grad(self) -> None:
        for buffer in self.grads.values():
            buffer.fill(0.0)

    def remove(self, name: str) -> None:
        for table in (self.values, self.grads, self.m, self.v):
            table.pop(name, None)

    def reindex_rows(self, name: str, keep: np.ndarray, new_rows: Optional[np.ndarray] = None) -> None:
        """
        点ごとのパラメータを行単位で入れ替える

        削除された行の最適化状態は破棄し、新しい行はゼロで初期化する。

        Args:
            name: パラメータ名
            keep: 残す行のインデックス
            new_rows: 末尾に追加する行
        """
        keep = np.asarray(keep, dtype=np.int64)
        value = self.values[name][keep]
        m = self.m[name][keep]
        v = self.v[name][keep]
        if new_rows is not None and len(new_rows) > 0:
            new_rows = np.asarray(new_rows, dtype=np.float64).reshape((-1,) + value.shape[1:])
            value = np.concatenate([value, new_rows])
            m = np.concatenate([m, np.zeros_like(new_rows)])
            v = np.concatenate([v, np.zeros_like(new_rows)])
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = m
        self.v[name] = v

    def nonfinite_grads(self) -> List[str]:
        """有限でない勾配を持つパラメータ名のリスト"""
        return [name for name in self.names() if not np.all(np.isfinite(self.grads[name]))]


def adam_step(
    store: ParameterStore,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    on_nonfinite: str = "abort",
    names: Optional[Iterable[str]] = None,
) -> bool:
    """
    バイアス補正付き Adam で1ステップ更新し、更新したパラメータの勾配をゼロに戻す

    names を指定した場合、対象外のパラメータの勾配はそのまま残る。
    有限でない勾配でスキップした場合はすべての勾配を捨てる。

    Args:
        store: パラメータストア
        lr: 学習率
        betas: (β1, β2)
        eps: 分母の安定化項
        on_nonfinite: 有限でない勾配の扱い（abort / skip）
        names: 更新対象（省略時は全パラメータ）

    Returns:
        更新を適用した場合 True

    Raises:
        NonFiniteError: on_nonfinite が abort で勾配が有限でない場合
    """
    bad = store.nonfinite_grads()
    if bad:
        if on_nonfinite == "abort":
            raise NonFiniteError(f"有限でない勾配があります: {bad}", {"parameters": bad})
        logger.warning("有限でない勾配のため更新をスキップします: %s", bad)
        store.zero_grad()
        return False

    beta1, beta2 = betas
    store.step += 1
    bias1 = 1.0 - beta1 ** store.step
    bias2 = 1.0 - beta2 ** store.step
    targets = store.names() if names is None else sorted(names)
    for name in targets:
        grad = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * (grad * grad)
        store.values[name] -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        grad.fill(0.0)
    return True


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """MLP の構成"""
    widths: Tuple[int, ...]             # (入力次元, 隠れ層..., 出力次元)
    activations: Tuple[str, ...]        # 層ごと、最終層は none
    weight_norm: Tuple[bool, ...]
    encoding_bands: int = 0
    output_scale: float = 1.0

    def __post_init__(self):
        n_layers = len(self.widths) - 1
        if n_layers < 1:
            raise ValueError("MLP には少なくとも1層が必要です")
        if len(self.activations) != n_layers or len(self.weight_norm) != n_layers:
            raise ValueError("activations / weight_norm の数が層数と一致しません")
        for kind in self.activations:
            if kind not in ACTIVATIONS:
                raise ValueError(f"不明な活性化関数です: {kind}")
        if self.activations[-1] != "none":
            raise ValueError("最終層の活性化は none である必要があります")

    @classmethod
    def build(
        cls,
        in_dim: int,
        out_dim: int,
        hidden: int = 128,
        depth: int = 3,
        activation: str = "softplus",
        weight_norm: bool = True,
        encoding_bands: int = 0,
        output_scale: float = 1.0,
    ) -> "MlpSpec":
        widths = (in_dim,) + (hidden,) * depth + (out_dim,)
        return cls(
            widths=widths,
            activations=(activation,) * depth + ("none",),
            weight_norm=(weight_norm,) * (depth + 1),
            encoding_bands=encoding_bands,
            output_scale=output_scale,
        )

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def fan_in(self, layer: int) -> int:
        if layer == 0 and self.encoding_bands > 0:
            return self.widths[0] * (1 + 2 * self.encoding_bands)
        return self.widths[layer]

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activations": list(self.activations),
            "weight_norm": list(self.weight_norm),
            "encoding_bands": self.encoding_bands,
            "output_scale": self.output_scale,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpSpec":
        return cls(
            widths=tuple(int(w) for w in data["widths"]),
            activations=tuple(data["activations"]),
            weight_norm=tuple(bool(f) for f in data["weight_norm"]),
            encoding_bands=int(data["encoding_bands"]),
            output_scale=float(data["output_scale"]),
        )


class Tape:
    """逆伝播に必要な中間値の記録"""

    def backward(self, adjoint: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class _LayerRecord:
    inputs: np.ndarray
    pre_activation: np.ndarray


@dataclass
class MlpTape(Tape):
    mlp: "Mlp"
    inputs: np.ndarray
    output_shape: Tuple[int, ...]
    layers: List[_LayerRecord] = field(default_factory=list)

    def backward(self, adjoint: np.ndarray) -> np.ndarray:
        return self.mlp.backward(self, adjoint)


def backward(tape: Tape, adjoint: np.ndarray) -> np.ndarray:
    """
    テープを逆にたどり、パラメータ勾配をストアへ加算する

    Returns:
        入力に対する勾配
    """
    return tape.backward(adjoint)


class Mlp:
    """
    ParameterStore にパラメータを置く MLP
    """

    def __init__(self, name: str, spec: MlpSpec, store: ParameterStore):
        self.name = name
        self.spec = spec
        self.store = store

    def param_name(self, layer: int, kind: str) -> str:
        return f"{self.name}.{layer}.{kind}"

    def initialize(self, rng: np.random.Generator) -> None:
        """
        一様分布 U(-1/√fan_in, 1/√fan_in) で初期化し、g を v の行ノルムに合わせる
        """
        spec = self.spec
        for layer in range(spec.n_layers):
            fan_in = spec.fan_in(layer)
            fan_out = spec.widths[layer + 1]
            bound = 1.0 / np.sqrt(fan_in)
            if layer == spec.n_layers - 1:
                bound *= spec.output_scale
            v = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.store.add(self.param_name(layer, "v"), v)
            if spec.weight_norm[layer]:
                self.store.add(self.param_name(layer, "g"), np.linalg.norm(v, axis=1))
            self.store.add(self.param_name(layer, "b"), np.zeros(fan_out))

    def zero_output(self) -> None:
        """最終層の出力をゼロにする（g と b、または v と b をゼロ化）"""
        last = self.spec.n_layers - 1
        if self.spec.weight_norm[last]:
            self.store[self.param_name(last, "g")].fill(0.0)
        else:
            self.store[self.param_name(last, "v")].fill(0.0)
        self.store[self.param_name(last, "b")].fill(0.0)

    def weight(self, layer: int) -> np.ndarray:
        v = self.store[self.param_name(layer, "v")]
        if self.spec.weight_norm[layer]:
            weight, _ = weightnorm_weight(v, self.store[self.param_name(layer, "g")])
            return weight
        return v

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, MlpTape]:
        """
        順伝播

        Args:
            x: 入力 (N, in_dim)

        Returns:
            (出力 (N, out_dim), テープ)
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ShapeMismatchError(
                f"{self.name}: 入力形状 {x.shape} は (N, {self.spec.in_dim}) である必要があります"
            )
        hidden = positional_encoding(x, self.spec.encoding_bands)
        tape = MlpTape(mlp=self, inputs=x, output_shape=(x.shape[0], self.spec.out_dim))
        for layer, kind in enumerate(self.spec.activations):
            pre = hidden @ self.weight(layer).T + self.store[self.param_name(layer, "b")]
            tape.layers.append(_LayerRecord(inputs=hidden, pre_activation=pre))
            hidden = activation_forward(pre, kind)
        return hidden, tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: MlpTape, adjoint: np.ndarray) -> np.ndarray:
        """
        逆伝播（勾配はストアへ加算）

        Args:
            tape: forward のテープ
            adjoint: 出力に対する勾配

        Returns:
            入力に対する勾配
        """
        adjoint = np.asarray(adjoint, dtype=np.float64)
        if adjoint.shape != tape.output_shape:
            raise ShapeMismatchError(
                f"{self.name}: 随伴の形状 {adjoint.shape} が出力形状 {tape.output_shape} と一致しません"
            )
        grad = adjoint
        for layer in reversed(range(self.spec.n_layers)):
            record = tape.layers[layer]
            grad_pre = activation_backward(record.pre_activation, self.spec.activations[layer], grad)
            v = self.store[self.param_name(layer, "v")]
            if self.spec.weight_norm[layer]:
                g = self.store[self.param_name(layer, "g")]
                grad, grad_v, grad_g, grad_b = linear_weightnorm_backward(record.inputs, v, g, grad_pre)
                self.store.accumulate(self.param_name(layer, "g"), grad_g)
            else:
                grad_v = grad_pre.T @ record.inputs
                grad_b = grad_pre.sum(axis=0)
                grad = grad_pre @ v
            self.store.accumulate(self.param_name(layer, "v"), grad_v)
            self.store.accumulate(self.param_name(layer, "b"), grad_b)
        return positional_encoding_backward(tape.inputs, self.spec.encoding_bands, grad)


def mlp_forward(mlp: Mlp, x: np.ndarray) -> Tuple[np.ndarray, MlpTape]:
    """Mlp.forward の関数形"""
    return mlp.forward(x)
