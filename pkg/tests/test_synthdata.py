#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
合成データ生成のテスト
"""

from pathlib import Path

import numpy as np
import pytest

from src.core.deform import lbs_transform
from src.core.gaussian_cloud import Camera, PoseExpression, validate_cloud
from src.core.synthdata import (
    JAW, FrameRecord, SceneConfig, build_minirig, build_scene, deform_gt_cloud, frame_latents,
    generate_dataset, jaw_weight, load_dataset, orbit_cameras, pose_corrective_weights, render_gt_frame,
    sample_gt_cloud, skinning_weights,
)


def small_config(**changes) -> SceneConfig:
    values = dict(
        seed=7, n_frames=4, n_heldout=2, width=32, height=32,
        n_gt_points=400, n_template_vertices=200, n_expressions=4, focal=50.0,
    )
    values.update(changes)
    return SceneConfig(**values)


class TestMiniRig:
    """ミニリグのテストクラス"""

    def test_deterministic(self):
        a = build_minirig(seed=3, n_vertices=100, n_expressions=4)
        b = build_minirig(seed=3, n_vertices=100, n_expressions=4)
        np.testing.assert_array_equal(a.template.expr_bases, b.template.expr_bases)
        np.testing.assert_array_equal(a.rig.joint_regressor, b.rig.joint_regressor)

    def test_shapes(self):
        minirig = build_minirig(seed=1, n_vertices=100, n_expressions=4)
        template = minirig.template
        assert template.vertices.shape == (100, 3)
        assert template.expr_bases.shape == (100, 4, 3)
        assert template.pose_bases.shape == (100, 18, 3)
        assert template.skin_weights.shape == (100, 3)
        assert minirig.rig.n_joints == 3

    def test_head_inside_unit_sphere(self):
        minirig = build_minirig(seed=1, n_vertices=300)
        assert np.all(np.linalg.norm(minirig.template.vertices, axis=1) < 1.0)

    def test_skinning_weights_simplex(self):
        weights = build_minirig(seed=1, n_vertices=300).template.skin_weights
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)
        assert np.all(weights >= 0.0)
        assert np.all((weights == 0.0) | (weights >= 0.01))

    def test_root_joint_does_not_move_with_expression(self):
        minirig = build_minirig(seed=1, n_vertices=100)
        np.testing.assert_array_equal(minirig.rig.joint_regressor[0], 0.0)

    def test_pose_bases_follow_jaw_skinning(self):
        template = build_minirig(seed=1, n_vertices=2000).template
        unskinned = template.skin_weights[:, JAW] == 0.0
        np.testing.assert_array_equal(template.pose_bases[unskinned], 0.0)

    def test_faint_jaw_weight_does_not_move(self):
        """顎の重みが閾値未満の点は顎を回しても動かない"""
        points = np.array([
            [0.0, -0.05 - 0.15 * 0.005, 0.1],
            [0.0, -0.05 - 0.15 * 0.5, 0.1],
        ])
        np.testing.assert_allclose(jaw_weight(points), [0.005, 0.5])
        skin = skinning_weights(points)
        assert skin[0, JAW] == 0.0
        np.testing.assert_array_equal(pose_corrective_weights(points), [0.0, 0.5])

        rig = build_minirig(seed=1, n_vertices=100, n_expressions=2).rig
        directions = np.random.default_rng(0).normal(size=(rig.pose_feature_dim, 3))
        pose_bases = 0.005 * pose_corrective_weights(points)[:, None, None] * directions[None]
        latents = PoseExpression.zeros(3, 2)
        latents.theta[JAW, 0] = 0.35
        x_d, _ = lbs_transform(points, np.zeros((2, 2, 3)), pose_bases, skin, latents.theta, latents.psi, rig)
        np.testing.assert_allclose(x_d[0], points[0], atol=1e-12)
        assert np.linalg.norm(x_d[1] - points[1]) > 1e-3


class TestGroundTruthCloud:
    """正解点群のテストクラス"""

    @pytest.fixture
    def scene(self):
        return build_scene(small_config())

    def test_cloud_is_valid(self, scene):
        assert validate_cloud(scene.gt_cloud) == []
        assert scene.gt_cloud.n_points == 400
        assert np.all(np.linalg.norm(scene.gt_cloud.means, axis=1) < 1.0)

    def test_invalid_point_count(self):
        with pytest.raises(ValueError):
            sample_gt_cloud(build_minirig(n_vertices=50, n_expressions=2), n_points=0)

    def test_rest_pose_is_identity(self, scene):
        zero = PoseExpression.zeros(3, 4)
        deformed = deform_gt_cloud(scene, zero)
        np.testing.assert_allclose(deformed.means, scene.gt_cloud.means, atol=1e-12)
        np.testing.assert_allclose(deformed.colors, scene.gt_cloud.colors, atol=1e-8)
        assert deformed.space_tag == "deformed"

    def test_jaw_moves_only_jaw_region(self, scene):
        latents = PoseExpression.zeros(3, 4)
        latents.theta[JAW, 0] = 0.3
        deformed = deform_gt_cloud(scene, latents)
        jaw = scene.minirig.template.skin_weights[scene.gt_vertex, JAW]
        moved = np.linalg.norm(deformed.means - scene.gt_cloud.means, axis=1)
        np.testing.assert_allclose(moved[jaw == 0.0], 0.0, atol=1e-12)
        assert np.any(moved[jaw > 0.5] > 1e-3)

    def test_open_jaw_darkens_mouth(self, scene):
        latents = PoseExpression.zeros(3, 4)
        latents.theta[JAW, 0] = scene.config.jaw_amplitude
        deformed = deform_gt_cloud(scene, latents)
        jaw = scene.minirig.template.skin_weights[scene.gt_vertex, JAW] > 0.5
        assert np.all(deformed.colors[jaw] < scene.gt_cloud.colors[jaw])


class TestFrames:
    """フレーム列とカメラのテストクラス"""

    def test_latents_and_splits(self):
        config = small_config()
        latents, splits = frame_latents(config, 3, np.random.default_rng(0))
        assert len(latents) == 6
        assert splits == ["train"] * 4 + ["heldout"] * 2
        np.testing.assert_array_equal(latents[0].theta, 0.0)
        np.testing.assert_array_equal(latents[0].psi, 0.0)
        assert latents[1].psi.shape == (4,)

    def test_first_camera_is_frontal(self):
        camera = orbit_cameras(small_config(), 4)[0]
        eye = -camera.rotation.T @ camera.translation
        np.testing.assert_allclose(eye[[0]], [0.0], atol=1e-12)
        assert eye[2] > 0.0

    def test_silhouette_coverage(self):
        scene = build_scene(small_config(width=48, height=48, focal=75.0, n_gt_points=2000))
        image = render_gt_frame(scene, 0)
        coverage = np.mean(image.max(axis=2) > 0.05)
        assert 0.1 <= coverage <= 0.6


class TestDatasetIO:
    """データセット入出力のテストクラス"""

    @pytest.fixture
    def dataset_dir(self, tmp_path):
        scene = build_scene(small_config())
        records, error = generate_dataset(scene, str(tmp_path / "data"), progress=False, config_digest="abc")
        assert error is None
        return tmp_path / "data", scene, records

    def test_files_written(self, dataset_dir):
        root, _, records = dataset_dir
        for name in ("cameras.json", "latents.csv", "rig.txt", "meta.txt", "gt_cloud.ply"):
            assert (root / name).exists()
        assert (root / "frames" / "frame_0005.png").exists()
        assert (root / "frames" / "frame_0005.npy").exists()
        assert len(records) == 6

    def test_round_trip(self, dataset_dir):
        root, scene, records = dataset_dir
        dataset, error = load_dataset(str(root))
        assert error is None
        assert len(dataset.split("train")) == 4
        assert len(dataset.split("heldout")) == 2
        assert len(dataset.split("all")) == 6
        assert dataset.meta["seed"] == "7"
        assert dataset.meta["config_hash"] == "abc"
        np.testing.assert_array_equal(dataset.rig.joint_regressor, scene.minirig.rig.joint_regressor)
        np.testing.assert_array_equal(dataset.template.skin_weights, scene.minirig.template.skin_weights)

        frame = dataset.frames[3]
        np.testing.assert_array_equal(frame.latents.theta, scene.latents[3].theta)
        np.testing.assert_array_equal(frame.latents.psi, scene.latents[3].psi)
        np.testing.assert_allclose(frame.camera.rotation, scene.cameras[3].rotation)
        image, error = frame.load()
        assert error is None
        np.testing.assert_allclose(image, records[3].image, atol=1e-6)

    def test_png_fallback(self, dataset_dir):
        root, _, records = dataset_dir
        (root / "frames" / "frame_0001.npy").unlink()
        dataset, _ = load_dataset(str(root))
        assert Path(dataset.frames[1].image_path).suffix == ".png"
        image, error = dataset.frames[1].load()
        assert error is None
        np.testing.assert_allclose(image, records[1].image, atol=0.5 / 255 + 1e-9)

    def test_missing_directory(self, tmp_path):
        dataset, error = load_dataset(str(tmp_path / "missing"))
        assert dataset is None
        assert error

    def test_resolution_mismatch(self, dataset_dir):
        root, _, _ = dataset_dir
        record = FrameRecord(
            index=0, image_path=str(root / "frames" / "frame_0000.npy"),
            camera=Camera.look_at((0.0, 0.0, 2.5), width=16, height=16),
            latents=PoseExpression.zeros(3, 4),
        )
        image, error = record.load()
        assert image is None
        assert "解像度" in error

    def test_threads_do_not_change_images(self, tmp_path):
        scene = build_scene(small_config(n_gt_points=200))
        single, _ = generate_dataset(scene, str(tmp_path / "a"), threads=1, progress=False)
        multi, _ = generate_dataset(scene, str(tmp_path / "b"), threads=3, progress=False)
        for a, b in zip(single, multi):
            np.testing.assert_array_equal(a.image, b.image)
