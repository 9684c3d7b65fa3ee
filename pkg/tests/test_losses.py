#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
損失関数のテスト
"""

import logging

import numpy as np
import pytest

from src.core.deform import RigTemplate
from src.core.errors import ShapeMismatchError, WindowSizeError
from src.core.fields import TemplateOutput
from src.core.gaussian_cloud import LossWeights
from src.core.losses import (
    IdentityExtractor, LossParts, RandomConvExtractor, dssim_loss, flame_reg_loss, image_losses, make_extractor,
    nearest_vertex, perceptual_loss, pseudo_ground_truth, rgb_loss, ssim, total_loss,
)
from tests.gradcheck import assert_gradient


@pytest.fixture
def images(rng):
    pred = rng.uniform(0.0, 1.0, size=(13, 12, 3))
    target = np.clip(pred + rng.normal(0.0, 0.1, size=pred.shape), 0.0, 1.0)
    return pred, target


class TestRgbLoss:
    """RGB 損失のテストクラス"""

    def test_identical_is_zero(self, images):
        value, grad = rgb_loss(images[0], images[0])
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_value(self):
        value, _ = rgb_loss(np.full((2, 2, 3), 0.5), np.full((2, 2, 3), 0.25))
        assert value == pytest.approx(0.25)

    def test_gradient(self, rng):
        pred = rng.uniform(size=(4, 5, 3))
        target = pred + rng.choice([-0.2, 0.2], size=pred.shape)
        _, grad = rgb_loss(pred, target)
        assert_gradient(lambda p: rgb_loss(p, target)[0], pred, grad)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            rgb_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSsim:
    """SSIM / D-SSIM のテストクラス"""

    def test_identical_is_one(self, images):
        value, grad = ssim(images[0], images[0])
        assert value == pytest.approx(1.0)
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_symmetric(self, images):
        pred, target = images
        assert ssim(pred, target)[0] == pytest.approx(ssim(target, pred)[0], abs=1e-12)

    def test_bounded(self, images):
        value, _ = ssim(*images)
        assert -1.0 <= value < 1.0

    def test_gradient(self, images):
        pred, target = images
        _, grad = ssim(pred, target)
        assert_gradient(lambda p: ssim(p, target)[0], pred, grad)

    def test_dssim_gradient(self, images):
        pred, target = images
        value, grad = dssim_loss(pred, target)
        assert value == pytest.approx((1.0 - ssim(pred, target)[0]) / 2.0)
        assert_gradient(lambda p: dssim_loss(p, target)[0], pred, grad)

    def test_image_smaller_than_window(self):
        with pytest.raises(WindowSizeError):
            ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def random_template(rng, n_vertices=30, n_expressions=3, n_joints=3):
    weights = rng.uniform(size=(n_vertices, n_joints))
    return RigTemplate(
        vertices=rng.normal(size=(n_vertices, 3)),
        expr_bases=rng.normal(size=(n_vertices, n_expressions, 3)),
        pose_bases=rng.normal(size=(n_vertices, 9 * (n_joints - 1), 3)),
        skin_weights=weights / weights.sum(axis=1, keepdims=True),
    )


class TestFlameReg:
    """FLAME 正則化のテストクラス"""

    def test_nearest_vertex_matches_brute_force(self, rng):
        points = rng.normal(size=(50, 3))
        vertices = rng.normal(size=(20, 3))
        brute = np.argmin(np.linalg.norm(points[:, None] - vertices[None], axis=2), axis=1)
        np.testing.assert_array_equal(nearest_vertex(points, vertices), brute)

    def test_pseudo_ground_truth_copies_vertex_rows(self, rng):
        template = random_template(rng)
        points = template.vertices[[4, 7, 7]] + 1e-6
        pseudo = pseudo_ground_truth(points, template)
        np.testing.assert_array_equal(pseudo.vertex_index, [4, 7, 7])
        np.testing.assert_array_equal(pseudo.expr_bases, template.expr_bases[[4, 7, 7]])
        np.testing.assert_array_equal(pseudo.skin_weights, template.skin_weights[[4, 7, 7]])

    def test_zero_when_equal(self, rng):
        template = random_template(rng)
        pseudo = pseudo_ground_truth(template.vertices[:5], template)
        learned = TemplateOutput(pseudo.expr_bases.copy(), pseudo.pose_bases.copy(), pseudo.skin_weights.copy())
        value, grads = flame_reg_loss(learned, pseudo)
        assert value == 0.0
        np.testing.assert_array_equal(grads.expr_bases, 0.0)

    def test_value_uses_flattened_norms(self, rng):
        template = random_template(rng)
        pseudo = pseudo_ground_truth(template.vertices[:2], template)
        learned = TemplateOutput(pseudo.expr_bases + 0.5, pseudo.pose_bases.copy(), pseudo.skin_weights.copy())
        weights = LossWeights(lambda_e=2.0)
        value, _ = flame_reg_loss(learned, pseudo, weights)
        assert value == pytest.approx(2.0 * 0.5 * np.sqrt(3 * 3))

    def test_gradient(self, rng):
        template = random_template(rng)
        pseudo = pseudo_ground_truth(rng.normal(size=(6, 3)), template)
        learned = TemplateOutput(
            pseudo.expr_bases + rng.normal(size=pseudo.expr_bases.shape),
            pseudo.pose_bases + rng.normal(size=pseudo.pose_bases.shape),
            pseudo.skin_weights + rng.normal(size=pseudo.skin_weights.shape),
        )
        weights = LossWeights(lambda_e=3.0, lambda_p=2.0, lambda_w=0.5)
        _, grads = flame_reg_loss(learned, pseudo, weights)

        def fn_expr(value):
            return flame_reg_loss(TemplateOutput(value, learned.pose_bases, learned.skin_weights), pseudo, weights)[0]

        def fn_weights(value):
            return flame_reg_loss(TemplateOutput(learned.expr_bases, learned.pose_bases, value), pseudo, weights)[0]

        assert_gradient(fn_expr, learned.expr_bases, grads.expr_bases)
        assert_gradient(fn_weights, learned.skin_weights, grads.skin_weights)

    def test_empty_cloud(self, rng):
        template = random_template(rng)
        pseudo = pseudo_ground_truth(np.zeros((0, 3)), template)
        learned = TemplateOutput(np.zeros((0, 3, 3)), np.zeros((0, 18, 3)), np.zeros((0, 3)))
        value, grads = flame_reg_loss(learned, pseudo)
        assert value == 0.0
        assert grads.skin_weights.shape == (0, 3)


class TestPerceptual:
    """知覚損失のテストクラス"""

    def test_identity_extractor_equals_rgb(self, images):
        value, grad = perceptual_loss(*images, IdentityExtractor())
        expected, expected_grad = rgb_loss(*images)
        assert value == pytest.approx(expected)
        np.testing.assert_allclose(grad, expected_grad)

    def test_missing_extractor_warns(self, images, caplog):
        with caplog.at_level(logging.WARNING):
            value, grad = perceptual_loss(*images, None)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)
        assert caplog.records

    def test_random_conv_is_deterministic(self, images):
        a = RandomConvExtractor(seed=5).features(images[0])
        b = RandomConvExtractor(seed=5).features(images[0])
        assert len(a) == 4
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa, fb)

    def test_random_conv_gradient(self, rng):
        extractor = RandomConvExtractor(layers=2, channels=3, seed=2)
        pred = rng.uniform(size=(5, 6, 3))
        target = rng.uniform(size=(5, 6, 3))
        _, grad = perceptual_loss(pred, target, extractor)
        assert_gradient(lambda p: perceptual_loss(p, target, extractor)[0], pred, grad, rtol=1e-3)

    def test_make_extractor(self):
        assert isinstance(make_extractor("random_conv"), RandomConvExtractor)
        assert isinstance(make_extractor("identity"), IdentityExtractor)
        assert make_extractor("none") is None
        with pytest.raises(ValueError):
            make_extractor("vgg19")


class TestTotal:
    """重み付き和のテストクラス"""

    def test_total_loss(self):
        parts = LossParts(rgb=1.0, dssim=2.0, flame=3.0, vgg=4.0)
        weights = LossWeights(lambda_rgb=1.0, lambda_dssim=0.5, lambda_flame=2.0, lambda_vgg=0.25)
        assert total_loss(parts, weights, flame_multiplier=0.5) == pytest.approx(1.0 + 1.0 + 3.0 + 1.0)

    def test_image_losses_gradient(self, images):
        pred, target = images
        weights = LossWeights(lambda_vgg=0.0)
        parts, grad = image_losses(pred, target, weights)
        assert parts.vgg == 0.0
        expected = rgb_loss(pred, target)[1] + 0.25 * dssim_loss(pred, target)[1]
        np.testing.assert_allclose(grad, expected)

    def test_parts_dict(self):
        assert set(LossParts().as_dict()) == {"rgb", "dssim", "flame", "vgg"}
