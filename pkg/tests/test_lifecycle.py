#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
点群ライフサイクル（スケジュール・削除・アップサンプリング）のテスト
"""

import logging

import numpy as np
import pytest

from src.core.lifecycle import (
    EARLY_TARGETS, FINAL_TARGET, LifecycleSchedule, end_of_epoch, initial_points, prune, prune_unseen,
    schedule_at_epoch, upsample,
)


class TestSchedule:
    """スケジュールのテストクラス"""

    @pytest.mark.parametrize("epoch, target", [
        (0, 400), (4, 400), (5, 800), (10, 1600), (35, 40000), (39, 40000),
        (40, 80000), (49, 80000), (50, 100000), (60, 100000), (150, 100000),
    ])
    def test_targets(self, epoch, target):
        assert schedule_at_epoch(epoch).target_count == target

    def test_radii_decay(self):
        schedule = LifecycleSchedule()
        assert schedule_at_epoch(0, schedule).sampling_radius == pytest.approx(0.5)
        assert schedule_at_epoch(5, schedule).sampling_radius == pytest.approx(0.375)
        assert schedule_at_epoch(10, schedule).rendering_radius == pytest.approx(0.5 * 0.75 ** 2)
        assert schedule_at_epoch(40, schedule).sampling_radius == pytest.approx(0.5 * 0.75 ** 8)
        assert schedule_at_epoch(50, schedule).sampling_radius == pytest.approx(0.5 * 0.75 ** 9)

    def test_sampling_radius_floor_after_100(self):
        schedule = LifecycleSchedule()
        assert schedule_at_epoch(100, schedule).sampling_radius == pytest.approx(0.004)
        assert schedule_at_epoch(200, schedule).sampling_radius == pytest.approx(0.004)
        late = [schedule_at_epoch(e, schedule).rendering_radius for e in (100, 150)]
        assert late[0] == pytest.approx(late[1])

    def test_radii_monotone(self):
        schedule = LifecycleSchedule()
        sampling = [schedule_at_epoch(e, schedule).sampling_radius for e in range(120)]
        rendering = [schedule_at_epoch(e, schedule).rendering_radius for e in range(120)]
        assert all(b <= a for a, b in zip(sampling, sampling[1:]))
        assert all(b <= a for a, b in zip(rendering, rendering[1:]))

    def test_upsample_flag(self):
        assert not schedule_at_epoch(0).upsample
        assert not schedule_at_epoch(4).upsample
        assert schedule_at_epoch(5).upsample
        assert not schedule_at_epoch(60).upsample

    def test_epoch_scale(self):
        schedule = LifecycleSchedule(epoch_scale=5.0)
        assert schedule_at_epoch(1, schedule).target_count == 800
        assert schedule_at_epoch(2, schedule).target_count == 1600

    def test_max_points_caps_target(self):
        schedule = LifecycleSchedule(max_points=1000)
        assert schedule_at_epoch(10, schedule).target_count == 1000
        assert not schedule_at_epoch(15, schedule).upsample

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            schedule_at_epoch(-1)

    def test_invalid_decay_rejected(self):
        with pytest.raises(ValueError):
            LifecycleSchedule(decay=1.0)

    def test_pointavatar_doubles(self):
        schedule = LifecycleSchedule(strategy="pointavatar")
        assert schedule_at_epoch(0, schedule).target_count == 400
        assert schedule_at_epoch(5, schedule).target_count == 800
        assert schedule_at_epoch(5, schedule).upsample
        assert schedule_at_epoch(5, schedule).sampling_radius == pytest.approx(0.5)

    def test_targets_constants(self):
        assert EARLY_TARGETS[0] == 400
        assert FINAL_TARGET == 100000


class TestPruneAndUpsample:
    """削除とアップサンプリングのテストクラス"""

    def test_initial_points_on_sphere(self, rng):
        points = initial_points(LifecycleSchedule(init_points=50, init_sphere_radius=0.3), rng)
        assert points.shape == (50, 3)
        np.testing.assert_allclose(np.linalg.norm(points, axis=1), 0.3)

    def test_prune_threshold(self, rng):
        points = rng.normal(size=(5, 3))
        kept, keep = prune(points, np.array([0.05, 0.2, 0.1, 0.0, 0.9]), threshold=0.1)
        np.testing.assert_array_equal(keep, [1, 2, 4])
        np.testing.assert_array_equal(kept, points[[1, 2, 4]])

    def test_prune_keeps_best_when_all_fail(self, rng, caplog):
        points = rng.normal(size=(3, 3))
        with caplog.at_level(logging.WARNING):
            kept, keep = prune(points, np.array([0.01, 0.05, 0.02]), threshold=0.1)
        np.testing.assert_array_equal(keep, [1])
        assert kept.shape == (1, 3)
        assert caplog.records

    def test_prune_length_mismatch(self, rng):
        with pytest.raises(ValueError):
            prune(rng.normal(size=(3, 3)), np.ones(2))

    def test_prune_unseen(self, rng):
        points = rng.normal(size=(4, 3))
        _, keep = prune_unseen(points, np.array([0, 3, 0, 1]))
        np.testing.assert_array_equal(keep, [1, 3])

    def test_upsample_count_and_radius(self, rng):
        points = rng.normal(size=(10, 3))
        grown, parents = upsample(points, 50, 0.05, rng)
        assert grown.shape == (50, 3)
        np.testing.assert_array_equal(grown[:10], points)
        distance = np.linalg.norm(grown[10:] - points[parents], axis=1)
        assert np.all(distance <= 0.05 + 1e-12)

    def test_upsample_noop_when_target_reached(self, rng):
        points = rng.normal(size=(10, 3))
        grown, parents = upsample(points, 8, 0.05, rng)
        assert grown is points
        assert parents.size == 0


class TestEndOfEpoch:
    """エポック終了処理のテストクラス"""

    def test_count_matches_target(self, rng):
        schedule = LifecycleSchedule()
        points = initial_points(schedule, rng)
        opacity = np.full(points.shape[0], 0.5)
        opacity[:30] = 0.01
        result = end_of_epoch(points, 5, schedule, rng, mean_opacity=opacity)
        assert result.points.shape == (800, 3)
        assert result.keep.size == 370
        assert result.n_added == 430
        assert result.entry.target_count == 800

    def test_refills_pruned_points_within_stage(self, rng):
        schedule = LifecycleSchedule()
        points = initial_points(schedule, rng)
        opacity = np.full(points.shape[0], 0.5)
        opacity[:10] = 0.0
        result = end_of_epoch(points, 2, schedule, rng, mean_opacity=opacity)
        assert result.points.shape == (400, 3)

    def test_pointavatar_doubles_survivors(self, rng):
        schedule = LifecycleSchedule(strategy="pointavatar")
        points = rng.normal(size=(100, 3))
        hits = np.ones(100, dtype=int)
        hits[:20] = 0
        result = end_of_epoch(points, 5, schedule, rng, first_hits=hits)
        assert result.points.shape == (160, 3)
        result = end_of_epoch(points, 3, schedule, rng, first_hits=hits)
        assert result.points.shape == (80, 3)
