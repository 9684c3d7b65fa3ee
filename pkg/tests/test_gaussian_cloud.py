#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
点群・カメラ・係数の型のテスト
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import DegenerateRotationError, ShapeMismatchError
from src.core.gaussian_cloud import (
    Camera, GaussianCloud, LossWeights, PoseExpression, logit, normalize_quaternion,
    quaternion_matrix_backward, quaternion_to_matrix, sigmoid, validate_cloud,
)
from tests.conftest import random_cloud
from tests.gradcheck import assert_gradient


finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)


class TestQuaternion:
    """クォータニオン変換のテストクラス"""

    def test_identity(self):
        unit, rot = normalize_quaternion([2.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(unit, [1.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(rot, np.eye(3))

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateRotationError):
            normalize_quaternion([0.0, 0.0, 0.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(finite, min_size=4, max_size=4), st.floats(min_value=0.1, max_value=20.0))
    def test_scale_invariance(self, q, factor):
        q = np.array(q)
        if np.linalg.norm(q) < 1e-3:
            return
        _, rot = normalize_quaternion(q)
        _, scaled = normalize_quaternion(q * factor)
        np.testing.assert_allclose(rot, scaled, atol=1e-10)
        np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-10)
        assert np.linalg.det(rot) == pytest.approx(1.0)

    def test_matrix_backward(self, rng):
        for _ in range(20):
            q = rng.normal(size=(1, 4))
            q /= np.linalg.norm(q)
            weight = rng.normal(size=(1, 3, 3))

            def loss(x):
                return float(np.sum(quaternion_to_matrix(x) * weight))

            assert_gradient(loss, q, quaternion_matrix_backward(q, weight))


class TestActivations:
    def test_sigmoid_logit_inverse(self):
        p = np.array([0.01, 0.5, 0.9])
        np.testing.assert_allclose(sigmoid(logit(p)), p)

    def test_sigmoid_does_not_overflow(self):
        values = sigmoid(np.array([-1000.0, 1000.0]))
        np.testing.assert_allclose(values, [0.0, 1.0])


class TestGaussianCloud:
    """GaussianCloud のテストクラス"""

    @pytest.fixture
    def cloud(self, rng):
        return random_cloud(rng, 10)

    def test_valid_cloud_has_no_violations(self, cloud):
        assert validate_cloud(cloud) == []

    def test_zero_quaternion_reported(self, cloud):
        rotations = cloud.rotations.copy()
        rotations[3] = 0.0
        report = validate_cloud(cloud.with_changes(rotations=rotations))
        assert [(v.field, v.index) for v in report] == [("rotations", 3)]

    def test_nonfinite_reported(self, cloud):
        colors = cloud.colors.copy()
        colors[5, 1] = np.nan
        report = validate_cloud(cloud.with_changes(colors=colors))
        assert any(v.field == "colors" and v.index == 5 for v in report)

    def test_mismatched_lengths_reported(self, cloud):
        report = validate_cloud(cloud.with_changes(opacities=cloud.opacities[:-1]))
        assert any(v.field == "structure" for v in report)

    def test_unknown_space_tag_reported(self, cloud):
        report = validate_cloud(cloud.with_changes(space_tag="world"))
        assert any(v.field == "space_tag" for v in report)

    def test_huge_scale_logit_stays_finite(self, cloud):
        scales = cloud.scales.copy()
        scales[0] = 1000.0
        assert np.all(np.isfinite(cloud.with_changes(scales=scales).activated_scales()))

    def test_subset_and_concat(self, cloud):
        part = cloud.subset([0, 2, 4])
        assert part.n_points == 3
        np.testing.assert_array_equal(part.means[1], cloud.means[2])
        assert part.concat(part).n_points == 6

    def test_from_means(self):
        cloud = GaussianCloud.from_means(np.zeros((4, 3)))
        assert cloud.space_tag == "initialized"
        np.testing.assert_array_equal(cloud.rotations[:, 0], 1.0)
        assert validate_cloud(cloud) == []


class TestPoseExpression:
    def test_check_shapes(self):
        pose = PoseExpression.zeros(3, 5)
        pose.check(3, 5)
        with pytest.raises(ShapeMismatchError):
            pose.check(2, 5)
        with pytest.raises(ShapeMismatchError):
            pose.check(3, 4)

    def test_flat(self):
        pose = PoseExpression(theta=np.arange(6.0).reshape(2, 3), psi=np.array([7.0]))
        np.testing.assert_array_equal(pose.flat(), [0, 1, 2, 3, 4, 5, 7])


class TestCamera:
    """Camera のテストクラス"""

    def test_look_at_centers_target(self):
        camera = Camera.look_at((0.0, 0.0, 3.0), width=64, height=48, focal=100.0)
        cam_point = camera.rotation @ np.zeros(3) + camera.translation
        assert cam_point[2] == pytest.approx(3.0)
        np.testing.assert_allclose(cam_point[:2], 0.0, atol=1e-12)

    def test_world_up_projects_upwards(self):
        camera = Camera.look_at((0.0, 0.0, 3.0))
        up = camera.rotation @ np.array([0.0, 1.0, 0.0]) + camera.translation
        assert up[1] < 0.0

    def test_rescaled_doubles_focal(self):
        camera = Camera.look_at((0.0, 0.0, 3.0), width=64, height=64, focal=100.0)
        big = camera.rescaled(128, 128)
        assert big.fx == pytest.approx(200.0)
        assert big.cx == pytest.approx(63.5)

    def test_dict_round_trip(self):
        camera = Camera.look_at((0.5, 0.2, 3.0), width=40, height=30)
        restored = Camera.from_dict(camera.to_dict())
        np.testing.assert_array_equal(restored.rotation, camera.rotation)
        assert restored.width == 40 and restored.height == 30

    def test_invalid_intrinsics(self):
        with pytest.raises(ValueError):
            Camera(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)
        with pytest.raises(ValueError):
            Camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, near=1.0, far=0.5)


class TestLossWeights:
    def test_defaults(self):
        weights = LossWeights()
        assert weights.lambda_dssim == 0.25
        assert weights.lambda_e == 1000.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_rgb=-1.0)
