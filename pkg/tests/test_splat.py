#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
射影・画素重み・合成と検証用レンダラのテスト
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import DegenerateRotationError
from src.core.gaussian_cloud import Camera, GaussianCloud, quaternion_to_matrix
from src.core.splat import (
    ALPHA_MAX, LOW_PASS, composite_pixel, covariance_3d, covariance_backward, covariances,
    gaussian_pixel_weight, prepare_cloud, project_gaussian, project_points, projection_backward,
    render_oracle, scale_activation,
)
from tests.conftest import random_cloud
from tests.gradcheck import assert_gradient


class TestCovariance:
    """3D 共分散のテストクラス"""

    def test_identity_rotation(self):
        cov = covariance_3d([1.0, 0.0, 0.0, 0.0], [0.1, 0.2, 0.3])
        np.testing.assert_allclose(cov, np.diag([0.01, 0.04, 0.09]), atol=1e-15)

    def test_symmetric_positive_definite(self, rng):
        q = rng.normal(size=(10, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        cov = covariances(quaternion_to_matrix(q), rng.uniform(0.01, 0.1, size=(10, 3)))
        np.testing.assert_allclose(cov, np.transpose(cov, (0, 2, 1)), atol=1e-15)
        assert np.all(np.linalg.eigvalsh(cov) > 0.0)

    def test_backward(self, rng):
        rot = rng.normal(size=(3, 3, 3))
        scales = rng.uniform(0.1, 1.0, size=(3, 3))
        weight = rng.normal(size=(3, 3, 3))
        grad_rot, grad_scales = covariance_backward(rot, scales, weight)
        assert_gradient(lambda r: float(np.sum(covariances(r, scales) * weight)), rot, grad_rot)
        assert_gradient(lambda s: float(np.sum(covariances(rot, s) * weight)), scales, grad_scales)

    def test_scale_activation_adds_radius(self):
        np.testing.assert_allclose(scale_activation(np.zeros(3), 0.1), np.full(3, 1.1))

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            scale_activation(np.zeros(3), -0.1)


class TestProjection:
    """EWA 射影のテストクラス"""

    def test_center_projects_to_principal_point(self, camera):
        g = project_gaussian([0.0, 0.0, 0.0], np.eye(3) * 1e-4, camera)
        np.testing.assert_allclose(g.mean, [camera.cx, camera.cy], atol=1e-12)
        assert g.depth == pytest.approx(2.5)

    def test_low_pass_added(self, camera):
        g = project_gaussian([0.0, 0.0, 0.0], np.zeros((3, 3)), camera)
        np.testing.assert_allclose(g.cov, LOW_PASS * np.eye(2), atol=1e-15)

    def test_behind_camera_is_culled(self, camera):
        assert project_gaussian([0.0, 0.0, 3.0], np.eye(3) * 1e-4, camera) is None

    def test_image_axes(self, camera):
        right = project_gaussian([0.1, 0.0, 0.0], np.eye(3) * 1e-4, camera)
        up = project_gaussian([0.0, 0.1, 0.0], np.eye(3) * 1e-4, camera)
        assert right.mean[0] > camera.cx
        assert up.mean[1] < camera.cy

    def test_backward(self, rng):
        camera = Camera.look_at((0.3, -0.2, 2.0), width=32, height=32, focal=60.0)
        means = rng.uniform(-0.3, 0.3, size=(4, 3))
        a = rng.normal(size=(4, 3, 3))
        cov3d = 0.01 * a @ np.transpose(a, (0, 2, 1))
        w_mean = rng.normal(size=(4, 2))
        w_cov = rng.normal(size=(4, 2, 2))

        def loss(m, c):
            means2d, cov2d, _, _, _, _ = project_points(m, c, camera)
            return float(np.sum(means2d * w_mean) + np.sum(cov2d * w_cov))

        projected = prepare_cloud(GaussianCloud.from_means(means), camera)
        # 任意の共分散で随伴を検査する
        projected.cov3d = cov3d
        grad_means, grad_cov = projection_backward(projected, camera, w_mean, w_cov)
        assert_gradient(lambda m: loss(m, cov3d), means, grad_means)
        assert_gradient(lambda c: loss(means, c), cov3d, grad_cov)


class TestPixelWeight:
    """画素ごとの α のテストクラス"""

    def _gaussian(self, camera, opacity):
        return project_gaussian([0.0, 0.0, 0.0], np.eye(3) * 1e-3, camera, opacity=opacity)

    def test_peak_equals_opacity(self, camera):
        g = self._gaussian(camera, 0.6)
        assert gaussian_pixel_weight(g, g.mean) == pytest.approx(0.6)

    def test_clamped_to_max(self, camera):
        g = self._gaussian(camera, 1.0)
        assert gaussian_pixel_weight(g, g.mean) == ALPHA_MAX

    def test_below_threshold_is_zero(self, camera):
        g = self._gaussian(camera, 0.6)
        assert gaussian_pixel_weight(g, g.mean + 50.0) == 0.0
        assert gaussian_pixel_weight(self._gaussian(camera, 0.003), g.mean) == 0.0


class TestComposite:
    """前から後ろへの合成のテストクラス"""

    @given(st.lists(st.floats(min_value=0.004, max_value=0.9), min_size=0, max_size=3))
    @settings(max_examples=50, deadline=None)
    def test_white_layers_telescope(self, alphas):
        colors = np.ones((len(alphas), 3))
        out = composite_pixel(alphas, colors)
        expected = 1.0 - np.prod([1.0 - a for a in alphas])
        np.testing.assert_allclose(out, np.full(3, expected), atol=1e-12)

    @given(st.lists(st.floats(min_value=0.0, max_value=0.9), min_size=0, max_size=4),
           st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=50, deadline=None)
    def test_uniform_color_and_background(self, alphas, value):
        out = composite_pixel(alphas, np.full((len(alphas), 3), value), background=(value,) * 3)
        np.testing.assert_allclose(out, np.full(3, value), atol=1e-12)

    def test_early_termination_excludes_contribution(self):
        out = composite_pixel([0.99, 0.995], np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), background=(0.0, 0.0, 1.0))
        np.testing.assert_allclose(out, [0.99, 0.0, 0.01], atol=1e-12)

    def test_empty_is_background(self):
        np.testing.assert_allclose(composite_pixel([], np.zeros((0, 3)), (0.2, 0.3, 0.4)), [0.2, 0.3, 0.4])


class TestRenderOracle:
    """検証用レンダラのテストクラス"""

    def test_empty_cloud_is_background(self, camera):
        cloud = GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 1)), np.zeros((0, 3)))
        image = render_oracle(cloud, camera, background=(0.1, 0.2, 0.3))
        assert image.shape == (32, 32, 3)
        np.testing.assert_allclose(image, np.broadcast_to([0.1, 0.2, 0.3], image.shape))

    def test_matches_per_pixel_reference(self, rng, camera):
        cloud = random_cloud(rng, 4)
        image = render_oracle(cloud, camera, background=(0.5, 0.5, 0.5))

        unit = cloud.unit_rotations()
        scales = cloud.activated_scales()
        projected = []
        for i in range(cloud.n_points):
            cov = covariance_3d(unit[i], scales[i])
            g = project_gaussian(cloud.means[i], cov, camera,
                                 opacity=float(cloud.activated_opacities()[i, 0]),
                                 color=cloud.activated_colors()[i])
            projected.append((g.depth, i, g))
        projected.sort(key=lambda item: (item[0], item[1]))

        for row, col in [(0, 0), (16, 16), (10, 20), (25, 7)]:
            alphas = [gaussian_pixel_weight(g, (col, row)) for _, _, g in projected]
            colors = np.array([g.color for _, _, g in projected])
            expected = composite_pixel(alphas, colors, background=(0.5, 0.5, 0.5))
            np.testing.assert_allclose(image[row, col], expected, atol=1e-12)

    def test_values_in_unit_range(self, rng, camera):
        image = render_oracle(random_cloud(rng, 30), camera)
        assert image.min() >= 0.0
        assert image.max() <= 1.0

    def test_degenerate_rotation_raises(self, rng, camera):
        cloud = random_cloud(rng, 3)
        rotations = cloud.rotations.copy()
        rotations[1] = 0.0
        with pytest.raises(DegenerateRotationError):
            render_oracle(cloud.with_changes(rotations=rotations), camera)
