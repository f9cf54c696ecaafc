import math

import numpy as np
import pytest

from lidarmot.dataset import DetectedBox
from lidarmot.geometry import Pose, apply_interpolated
from lidarmot.simulate import (
    BoxNoiseConfig,
    DynamicBox,
    ScannerConfig,
    StaticBox,
    WorldModel,
    oracle_detect,
    room_world,
    simulate_scan,
    simulate_sequence,
    stationary,
    straight_line,
)


def surface_distance(world, points_world):
    """Distance of each point to the nearest world surface (ground or box face)."""
    best = np.full(len(points_world), np.inf)
    if world.ground_normal is not None:
        best = np.minimum(best, np.abs(points_world @ world.ground_normal - world.ground_offset))
    for box in world.static_boxes:
        local = box.pose.inverse().apply(points_world)
        half = box.size / 2
        outside = np.maximum(np.abs(local) - half, 0.0)
        outside_dist = np.linalg.norm(outside, axis=1)
        inside_dist = np.abs(np.max(np.abs(local) - half, axis=1))
        best = np.minimum(best, np.where(outside_dist > 0, outside_dist, inside_dist))
    return best


def test_static_world_points_on_surfaces(static_room_scan):
    world, trajectory, scan = static_room_scan
    points_world = trajectory(0.0).apply(scan.points.astype(float))
    assert surface_distance(world, points_world).max() < 1e-4


def test_rel_time_monotone_within_rings(static_room_scan):
    _, _, scan = static_room_scan
    for idx in scan.ring_indices():
        assert np.all(np.diff(scan.rel_time[idx]) >= 0)


def test_identical_scans_from_same_pose(small_scanner):
    world = room_world()
    trajectory = stationary(Pose.from_components(0, 0, 1.4, 0, 0, 0))
    a = simulate_scan(world, trajectory, 0, small_scanner)
    b = simulate_scan(world, trajectory, 1, small_scanner)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.ring, b.ring)


def test_max_range_gate():
    wall = StaticBox(size=np.array([0.5, 100.0, 100.0]), pose=Pose(np.eye(3), np.array([60.0, 0, 0])))
    world = WorldModel(static_boxes=[wall])
    cfg = ScannerConfig(num_rings=1, azimuth_steps=90, min_elevation_deg=0, max_elevation_deg=0, max_range=50.0)
    scan = simulate_scan(world, stationary(), 0, cfg)
    assert len(scan) == 0
    cfg_far = ScannerConfig(num_rings=1, azimuth_steps=90, min_elevation_deg=0, max_elevation_deg=0, max_range=80.0)
    assert len(simulate_scan(world, stationary(), 0, cfg_far)) > 0


def test_translating_sensor_distorts_wall():
    # Closed-form oracle: a forward ray at emission time t hits the wall at
    # sensor-frame depth (wall_x - v * t).
    wall = StaticBox(size=np.array([0.5, 200.0, 200.0]), pose=Pose(np.eye(3), np.array([20.0, 0, 0])))
    world = WorldModel(static_boxes=[wall])
    v = 3.0
    trajectory = straight_line(start=[0, 0, 0], velocity=[v, 0, 0])
    cfg = ScannerConfig(
        num_rings=1, azimuth_steps=360, min_elevation_deg=0, max_elevation_deg=0,
        max_range=80, min_range=0.1, frame_period=0.1,
    )
    scan = simulate_scan(world, trajectory, 0, cfg)
    azimuths = np.arctan2(scan.points[:, 1], scan.points[:, 0])
    forward = np.isclose(azimuths, 0.0, atol=1e-6)
    assert forward.any()
    for x, rel in zip(scan.points[forward, 0], scan.rel_time[forward]):
        expected = 19.75 - v * (rel * cfg.frame_period)
        assert x == pytest.approx(expected, abs=1e-4)


def test_fov_crop():
    world = room_world()
    cfg = ScannerConfig(num_rings=4, azimuth_steps=360, horizontal_fov_deg=90.0)
    scan = simulate_scan(world, stationary(Pose.from_components(0, 0, 1.4, 0, 0, 0)), 0, cfg)
    azimuths = np.arctan2(scan.points[:, 1], scan.points[:, 0])
    assert np.abs(azimuths).max() <= math.radians(45.0) + 1e-6


def test_dedistortion_recovers_static_geometry():
    # Points corrected with the true increment land exactly on the reference
    # frame geometry, for both the previous-frame and own-frame conventions.
    world = room_world()
    trajectory = straight_line(start=[0, 0, 1.3], velocity=[1.5, 0.4, 0], yaw=0.1, yaw_rate=0.3)
    cfg = ScannerConfig(num_rings=6, azimuth_steps=240)
    frame = 2
    scan = simulate_scan(world, trajectory, frame, cfg)
    dt = cfg.frame_period
    start_pose = trajectory(frame * dt)
    end_pose = trajectory((frame + 1) * dt)
    increment = start_pose.inverse().compose(end_pose)
    pts = scan.points.astype(float)
    to_prev = apply_interpolated(increment, scan.rel_time.astype(float), pts)
    world_prev = start_pose.apply(to_prev)
    assert surface_distance(world, world_prev).max() < 1e-4
    to_own = apply_interpolated(increment, scan.rel_time.astype(float) - 1.0, pts)
    world_own = end_pose.apply(to_own)
    assert surface_distance(world, world_own).max() < 1e-4


class TestOracleDetect:
    def _scene(self):
        world = room_world(half_size=18.0)
        body = DynamicBox(
            size=np.array([4.0, 1.8, 1.6]),
            trajectory=straight_line(start=[8.0, 2.0, 0.8], velocity=[0.0, 1.0, 0.0], yaw=0.5),
        )
        world.dynamic_boxes.append(body)
        trajectory = stationary(Pose.from_components(0, 0, 1.5, 0, 0, 0))
        cfg = ScannerConfig()
        scan = simulate_scan(world, trajectory, 0, cfg)
        return world, trajectory, scan

    def test_zero_noise_matches_truth(self):
        world, trajectory, scan = self._scene()
        rng = np.random.default_rng(0)
        detections = oracle_detect(world, scan, trajectory, BoxNoiseConfig(), rng)
        assert len(detections) == 1
        det = detections[0]
        truth = trajectory(scan.timestamp).inverse().compose(
            world.dynamic_boxes[0].trajectory(scan.timestamp)
        )
        assert np.allclose(det.center, truth.translation, atol=1e-9)
        assert det.yaw == pytest.approx(0.5, abs=1e-9)
        assert np.allclose(det.size, [4.0, 1.8, 1.6])
        assert det.gt_id == 0

    def test_dropout_one_empties_detections(self):
        world, trajectory, scan = self._scene()
        rng = np.random.default_rng(0)
        detections = oracle_detect(
            world, scan, trajectory, BoxNoiseConfig(dropout_prob=1.0), rng
        )
        assert detections == []

    def test_occluded_body_not_detected(self):
        world, trajectory, scan = self._scene()
        # A wall between sensor and body kills every return from it.
        world.static_boxes.append(
            StaticBox(size=np.array([0.4, 12.0, 6.0]), pose=Pose(np.eye(3), np.array([4.0, 2.0, 3.0])))
        )
        blocked = simulate_scan(world, trajectory, 0, ScannerConfig())
        assert not np.any(blocked.gt_object_ids == 0)
        rng = np.random.default_rng(0)
        assert oracle_detect(world, blocked, trajectory, BoxNoiseConfig(), rng) == []

    def test_indexed_points_inside_inflated_box(self):
        world, trajectory, scan = self._scene()
        rng = np.random.default_rng(0)
        det = oracle_detect(world, scan, trajectory, BoxNoiseConfig(), rng)[0]
        true_box = DetectedBox(
            center=det.center, size=det.size, yaw=det.yaw, confidence=1.0,
            point_indices=det.point_indices,
        )
        inside = true_box.contains(scan.points[det.point_indices].astype(float), inflate=1.05)
        assert inside.all()

    def test_confidence_range_decay(self):
        world, trajectory, scan = self._scene()
        rng = np.random.default_rng(0)
        det = oracle_detect(world, scan, trajectory, BoxNoiseConfig(), rng)[0]
        span = np.linalg.norm(det.center)
        assert det.confidence == pytest.approx(np.clip(1 - span / 50.0, 0.1, 1.0))
        det_const = oracle_detect(
            world, scan, trajectory,
            BoxNoiseConfig(confidence_model="constant", constant_confidence=0.77),
            np.random.default_rng(0),
        )[0]
        assert det_const.confidence == 0.77


def test_motion_validation_flags_teleport():
    world = WorldModel(ground_normal=np.array([0.0, 0.0, 1.0]))
    world.dynamic_boxes.append(
        DynamicBox(size=np.ones(3), trajectory=straight_line(start=[0, 0, 0], velocity=[50.0, 0, 0]))
    )
    with pytest.raises(ValueError, match="jumps"):
        world.validate_motion(frame_count=5, frame_period=0.1, max_speed=15.0)
    world.dynamic_boxes[0] = DynamicBox(
        size=np.ones(3), trajectory=straight_line(start=[0, 0, 0], velocity=[10.0, 0, 0])
    )
    world.validate_motion(frame_count=5, frame_period=0.1, max_speed=15.0)


def test_sequence_ground_truth_alignment():
    world, ego = room_world(), straight_line(start=[0, 0, 1.4], velocity=[1.0, 0, 0])
    seq = simulate_sequence(world, ego, 5, ScannerConfig(num_rings=4, azimuth_steps=120), seed=0)
    assert len(seq) == 5
    for i, scan in enumerate(seq.scans):
        assert scan.timestamp == pytest.approx((i + 1) * 0.1)
        truth = seq.ego_pose(i)
        expected = ego(scan.timestamp)
        assert np.linalg.norm(truth.matrix() - expected.matrix()) < 1e-9
