#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
テスト共通設定

slow マーカー付きのテスト（学習の閉ループ・ベンチマーク）は --runslow 指定時のみ実行する。
"""

import numpy as np
import pytest

from src.core.deform import RigDefinition
from src.core.gaussian_cloud import Camera, GaussianCloud


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="slow マーカー付きのテストも実行する")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 時間のかかるテスト（--runslow で実行）")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="--runslow を指定すると実行します")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def random_cloud(rng: np.random.Generator, n: int, space_tag: str = "deformed", spread: float = 0.3) -> GaussianCloud:
    """カメラ前方 (原点付近) に散らばったランダムな点群"""
    return GaussianCloud(
        means=rng.uniform(-spread, spread, size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        scales=rng.uniform(np.log(0.02), np.log(0.08), size=(n, 3)),
        opacities=rng.uniform(-1.0, 2.0, size=(n, 1)),
        colors=rng.normal(size=(n, 3)),
        space_tag=space_tag,
    )


def simple_rig(n_expressions: int = 4) -> RigDefinition:
    """根・子・孫の3関節の小さなリグ"""
    rng = np.random.default_rng(3)
    return RigDefinition(
        joint_names=("root", "child", "grandchild"),
        parents=(-1, 0, 1),
        rest_joints=np.array([[0.0, -0.3, 0.0], [0.0, 0.0, 0.1], [0.1, 0.1, 0.2]]),
        joint_regressor=0.05 * rng.normal(size=(3, 3, n_expressions)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    """原点を正面から見る 32x32 のカメラ"""
    return Camera.look_at((0.0, 0.0, 2.5), width=32, height=32, focal=60.0)
