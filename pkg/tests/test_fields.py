#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
学習フィールドのテスト
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.core.autodiff import ParameterStore
from src.core.errors import ShapeMismatchError
from src.core.fields import FieldBundle, FieldConfig, ParamBlock, TemplateOutput
from tests.gradcheck import assert_gradient


def make_fields(rng, **changes) -> FieldBundle:
    config = FieldConfig(**{"hidden": 8, "depth": 2, "head_scale": 0.5, **changes})
    fields = FieldBundle(n_joints=3, n_expressions=2, config=config)
    fields.initialize(rng)
    return fields


class TestFieldBundle:
    """FieldBundle のテストクラス"""

    @pytest.fixture
    def fields(self, rng):
        return make_fields(rng)

    @pytest.fixture
    def points(self, rng):
        return rng.uniform(-0.5, 0.5, size=(6, 3))

    def test_initial_bias(self, fields):
        last = fields.predict_net.spec.n_layers - 1
        bias = fields.store[fields.predict_net.param_name(last, "b")]
        np.testing.assert_allclose(bias[4:7], np.log(0.01))
        assert bias[7] == pytest.approx(0.0)

    def test_predict_shapes(self, fields, points):
        params, _ = fields.predict_canonical_params(points)
        assert params.rotations.shape == (6, 4)
        assert params.opacities.shape == (6, 1)

    def test_identity_when_outputs_zeroed(self, fields, points):
        fields.zero_outputs()
        x_o, offset, _ = fields.canonical_offset(points)
        np.testing.assert_array_equal(offset, 0.0)
        np.testing.assert_array_equal(x_o, points)
        params, _ = fields.param_deformation(points, points, offset)
        np.testing.assert_array_equal(params.as_array(), 0.0)

    def test_offset_is_capped(self, rng, points):
        fields = make_fields(rng, head_scale=100.0, offset_cap=0.05)
        _, offset, _ = fields.canonical_offset(points * 10.0)
        assert np.all(np.abs(offset) <= 0.05)

    def test_disabled_deformation_is_zero(self, rng, points):
        fields = make_fields(rng, deform_enabled=False)
        params, tape = fields.param_deformation(points, points + 0.1, np.zeros_like(points))
        np.testing.assert_array_equal(params.as_array(), 0.0)
        grads = fields.deformation_backward(tape, ParamBlock.from_array(np.ones((6, 11))))
        for grad in grads:
            np.testing.assert_array_equal(grad, 0.0)

    def test_deformation_shape_mismatch(self, fields, points):
        with pytest.raises(ShapeMismatchError):
            fields.param_deformation(points, points[:3], points)

    def test_template_shapes(self, fields, points):
        out, _ = fields.query_template(points)
        assert out.expr_bases.shape == (6, 2, 3)
        assert out.pose_bases.shape == (6, 18, 3)
        assert out.skin_weights.shape == (6, 3)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (5, 3), elements=st.floats(-5.0, 5.0)))
    def test_skin_weights_on_simplex(self, x):
        fields = make_fields(np.random.default_rng(0), head_scale=10.0)
        out, _ = fields.query_template(x)
        assert np.all(out.skin_weights >= 0.0)
        np.testing.assert_allclose(out.skin_weights.sum(axis=1), 1.0)

    def test_offset_gradient(self, fields, points, rng):
        w_xo = rng.normal(size=(6, 3))
        w_off = rng.normal(size=(6, 3))
        _, _, tape = fields.canonical_offset(points)
        analytic = fields.offset_backward(tape, w_xo, w_off)

        def loss(x):
            x_o, offset, _ = fields.canonical_offset(x)
            return float(np.sum(x_o * w_xo) + np.sum(offset * w_off))

        assert_gradient(loss, points, analytic)

    def test_template_gradient(self, fields, points, rng):
        weights = TemplateOutput(rng.normal(size=(6, 2, 3)), rng.normal(size=(6, 18, 3)), rng.normal(size=(6, 3)))
        _, tape = fields.query_template(points)
        analytic = fields.template_backward(tape, weights)

        def loss(x):
            out, _ = fields.query_template(x)
            return float(
                np.sum(out.expr_bases * weights.expr_bases)
                + np.sum(out.pose_bases * weights.pose_bases)
                + np.sum(out.skin_weights * weights.skin_weights)
            )

        assert_gradient(loss, points, analytic)

    def test_deformation_gradient(self, fields, points, rng):
        x_d = points + rng.normal(scale=0.1, size=points.shape)
        offset = rng.normal(scale=0.05, size=points.shape)
        weight = ParamBlock.from_array(rng.normal(size=(6, 11)))
        _, tape = fields.param_deformation(points, x_d, offset)
        grad_xc, grad_xd, grad_off = fields.deformation_backward(tape, weight)

        def loss_for(index):
            def loss(z):
                args = [points, x_d, offset]
                args[index] = z
                params, _ = fields.param_deformation(*args)
                return float(np.sum(params.as_array() * weight.as_array()))
            return loss

        assert_gradient(loss_for(0), points, grad_xc)
        assert_gradient(loss_for(1), x_d, grad_xd)
        assert_gradient(loss_for(2), offset, grad_off)

    def test_predict_gradient(self, fields, points, rng):
        weight = ParamBlock.from_array(rng.normal(size=(6, 11)))
        _, tape = fields.predict_canonical_params(points)
        analytic = fields.predict_backward(tape, weight)

        def loss(x):
            params, _ = fields.predict_canonical_params(x)
            return float(np.sum(params.as_array() * weight.as_array()))

        assert_gradient(loss, points, analytic)

    def test_description_round_trip(self, fields, points):
        restored = FieldBundle.from_description(fields.describe(), fields.store)
        a, _ = fields.predict_canonical_params(points)
        b, _ = restored.predict_canonical_params(points)
        np.testing.assert_array_equal(a.as_array(), b.as_array())

    def test_description_mismatch(self, fields):
        description = fields.describe()
        description["networks"]["predict"]["widths"][1] = 99
        with pytest.raises(ShapeMismatchError):
            FieldBundle.from_description(description, ParameterStore())
