import math

import numpy as np
import pytest

from lidarmot.dataset import DetectedBox, LidarScan
from lidarmot.geometry import Pose
from lidarmot.perception import (
    FeatureSet,
    GroundFitError,
    PerceptionConfig,
    assign_times_and_segment,
    compute_smoothness,
    dump_debug_csv,
    extract_features,
    fit_ground,
    fuse,
    perceive,
    smoothness_window,
)
from lidarmot.simulate import (
    BoxNoiseConfig,
    ScannerConfig,
    oracle_detect,
    room_world,
    simulate_scan,
    stationary,
)


def make_scan(points, ring=None, rel_time=None):
    points = np.asarray(points, dtype=np.float32)
    n = len(points)
    return LidarScan(
        points=points,
        rel_time=np.zeros(n, dtype=np.float32) if rel_time is None else rel_time,
        ring=np.zeros(n, dtype=np.uint16) if ring is None else ring,
        timestamp=0.1,
        frame_index=0,
    )


class TestGroundFit:
    def test_exact_plane_with_box_above(self):
        rng = np.random.default_rng(0)
        ground = np.column_stack([rng.uniform(-10, 10, 500), rng.uniform(-10, 10, 500), np.zeros(500)])
        box = np.column_stack([rng.uniform(-1, 1, 80), rng.uniform(-1, 1, 80), rng.uniform(1.0, 2.0, 80)])
        scan = make_scan(np.vstack([ground, box]))
        labels, (normal, offset) = fit_ground(scan, PerceptionConfig())
        assert abs(abs(normal[2]) - 1.0) < 1e-9
        assert offset == pytest.approx(0.0, abs=1e-9)
        assert labels[:500].all()
        assert not labels[500:].any()

    def test_all_points_on_plane(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(-5, 5, 300), rng.uniform(-5, 5, 300), np.full(300, -1.2)])
        labels, _ = fit_ground(make_scan(pts), PerceptionConfig())
        assert labels.all()

    def test_tilted_plane_recovered_within_half_degree(self):
        # Oracle: least-squares plane through the true ground points.
        rng = np.random.default_rng(2)
        tilt = Pose.from_components(0, 0, 0, 0.0, math.radians(5.0), 0.0)
        flat = np.column_stack([rng.uniform(-10, 10, 600), rng.uniform(-10, 10, 600), np.zeros(600)])
        ground = tilt.apply(flat)
        clutter = np.column_stack([rng.uniform(-4, 4, 60), rng.uniform(-4, 4, 60), rng.uniform(1.5, 3.0, 60)])
        scan = make_scan(np.vstack([ground, clutter]))
        _, (normal, _) = fit_ground(scan, PerceptionConfig())

        centered = ground - ground.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        oracle_normal = vt[2]
        if oracle_normal[2] < 0:
            oracle_normal = -oracle_normal
        angle = math.degrees(math.acos(np.clip(normal @ oracle_normal, -1, 1)))
        assert angle < 0.5

    def test_too_few_points_raises(self):
        scan = make_scan(np.zeros((10, 3)))
        with pytest.raises(GroundFitError):
            fit_ground(scan, PerceptionConfig())


class TestSegmentation:
    def _containers(self, labels_per_ring, cfg):
        # Points advance smoothly along a line so only label changes split runs.
        chunks = []
        rings = []
        points = []
        for ring, labels in enumerate(labels_per_ring):
            chunks.append(np.asarray(labels, dtype=np.uint8))
            rings.extend([ring] * len(labels))
            n = len(labels)
            points.append(np.column_stack([np.linspace(3, 3 + 0.05 * n, n),
                                           np.full(n, 2.0), np.full(n, float(ring))]))
        labels = np.concatenate(chunks)
        rel = np.concatenate([np.linspace(0, 1, len(c), endpoint=False) for c in chunks])
        scan = make_scan(np.vstack(points),
                         ring=np.array(rings, dtype=np.uint16), rel_time=rel.astype(np.float32))
        return scan, assign_times_and_segment(scan, labels, cfg)

    def test_single_ground_run(self):
        _, containers = self._containers([[1] * 30], PerceptionConfig())
        assert containers.ground_segments[0] == [(0, 29)]
        assert containers.background_segments[0] == []

    def test_alternating_labels_all_too_short(self):
        cfg = PerceptionConfig(min_run=3)
        _, containers = self._containers([[0, 1] * 15], cfg)
        assert containers.ground_segments[0] == []
        assert containers.background_segments[0] == []

    def test_run_length_oracle(self):
        # Hand-computed: 10 ground, 20 background, 10 ground.
        _, containers = self._containers([[1] * 10 + [0] * 20 + [1] * 10], PerceptionConfig())
        assert containers.ground_segments[0] == [(0, 9), (30, 39)]
        assert containers.background_segments[0] == [(10, 29)]

    def test_id_pairs_are_global_indices(self):
        scan, containers = self._containers([[1] * 8, [0] * 8], PerceptionConfig())
        assert containers.id_pairs("ground", 0) == [(0, 7)]
        assert containers.id_pairs("background", 1) == [(8, 15)]


class TestSmoothness:
    def test_collinear_points_zero(self):
        window = np.column_stack([np.linspace(4, 5, 11), np.ones(11), np.zeros(11)])
        assert smoothness_window(window) == pytest.approx(0.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        window = rng.normal(size=(11, 3)) + np.array([5.0, 0, 0])
        assert smoothness_window(2.0 * window) == pytest.approx(smoothness_window(window))

    def test_corner_rougher_than_wall(self):
        # Direct formula evaluation on a constructed right-angle corner.
        along_x = np.column_stack([np.linspace(2, 3, 11), np.full(11, 3.0), np.zeros(11)])
        corner = np.vstack([
            np.column_stack([np.linspace(2.5, 3.0, 6), np.full(6, 3.0), np.zeros(6)])[::-1],
            np.column_stack([np.full(5, 3.0), np.linspace(3.1, 3.5, 5), np.zeros(5)]),
        ])
        c_wall = smoothness_window(along_x)
        c_corner = smoothness_window(corner)
        assert c_corner > c_wall

    def test_segment_scoped_windows(self):
        # Points near segment boundaries stay NaN.
        cfg = PerceptionConfig(smoothness_half_width=2, min_run=5)
        pts = np.column_stack([np.linspace(1, 2, 20), np.zeros(20), np.zeros(20)])
        scan = make_scan(pts, ring=np.zeros(20, dtype=np.uint16),
                         rel_time=np.linspace(0, 0.9, 20).astype(np.float32))
        labels = np.concatenate([np.ones(10, dtype=np.uint8), np.zeros(10, dtype=np.uint8)])
        containers = assign_times_and_segment(scan, labels, cfg)
        smooth = compute_smoothness(scan, containers, cfg)
        assert np.isnan(smooth[[0, 1, 8, 9, 10, 11, 18, 19]]).all()
        assert np.isfinite(smooth[[2, 3, 4, 5, 6, 7, 12, 13, 14, 15, 16, 17]]).all()


@pytest.fixture(scope="module")
def room_frame():
    world = room_world()
    body_world = room_world()
    trajectory = stationary(Pose.from_components(0, 0, 1.5, 0, 0, 0))
    scan = simulate_scan(world, trajectory, 0, ScannerConfig())
    return world, trajectory, scan


class TestExtraction:
    def test_flat_room_features(self, room_frame):
        _, _, scan = room_frame
        features, boxes, labels = perceive(scan, None, PerceptionConfig())
        assert len(features.ground_features) > 0
        assert features.avg_ground_smoothness < 0.01
        assert boxes == []
        # Eq-style identity: the average equals the arithmetic mean exactly.
        assert features.avg_ground_smoothness == pytest.approx(
            float(np.mean(features.ground_features.smoothness)), abs=0.0
        )

    def test_candidates_superset_of_features(self, room_frame):
        _, _, scan = room_frame
        features, _, _ = perceive(scan, None, PerceptionConfig())
        assert np.all(np.isin(features.ground_features.indices, features.ground_candidates.indices))
        assert np.all(np.isin(features.edge_features.indices, features.edge_candidates.indices))
        assert np.all(np.isin(features.surface_features.indices, features.surface_candidates.indices))

    def test_corner_points_become_edges(self, room_frame):
        # Ranking oracle: physical corners (wall-wall or interior box corners)
        # carry the largest smoothness and must dominate the edge features.
        _, _, scan = room_frame
        features, _, _ = perceive(scan, None, PerceptionConfig())
        assert len(features.edge_features) > 0
        pts = features.edge_features.xyz
        near_corner = (np.abs(np.abs(pts[:, 0]) - 12.0) < 1.2) & (np.abs(np.abs(pts[:, 1]) - 12.0) < 1.2)
        interior_box = np.zeros(len(pts), dtype=bool)
        for cx, cy in ((4.0, 3.0), (-5.0, 4.0), (-3.0, -6.0), (6.0, -4.0)):
            interior_box |= (np.abs(pts[:, 0] - cx) < 1.6) & (np.abs(pts[:, 1] - cy) < 1.6)
        assert near_corner.any()
        assert (near_corner | interior_box).mean() >= 0.8

    def test_determinism(self, room_frame):
        _, _, scan = room_frame
        a, _, _ = perceive(scan, None, PerceptionConfig())
        b, _, _ = perceive(scan, None, PerceptionConfig())
        for name, fs in a.all_sets().items():
            assert np.array_equal(fs.indices, b.all_sets()[name].indices), name


class TestFusion:
    def _frame_with_detection(self):
        world = room_world(half_size=18.0)
        from lidarmot.simulate import DynamicBox, straight_line

        world.dynamic_boxes.append(
            DynamicBox(size=np.array([4.0, 1.8, 1.6]),
                       trajectory=straight_line(start=[7.0, 1.0, 0.8], velocity=[0, 0, 0])),
        )
        trajectory = stationary(Pose.from_components(0, 0, 1.5, 0, 0, 0))
        scan = simulate_scan(world, trajectory, 0, ScannerConfig())
        detections = oracle_detect(world, scan, trajectory, BoxNoiseConfig(), np.random.default_rng(0))
        return scan, detections

    def test_feature_box_disjointness(self):
        scan, detections = self._frame_with_detection()
        features, boxes, labels = perceive(scan, detections, PerceptionConfig())
        assert boxes, "expected the object to survive fusion"
        box_ids = np.concatenate([b.point_indices for b in boxes])
        for name, fs in features.all_sets().items():
            assert len(np.intersect1d(fs.indices, box_ids)) == 0, name

    def test_fuse_no_detections_is_identity(self):
        scan, _ = self._frame_with_detection()
        cfg = PerceptionConfig()
        features, _, labels = perceive(scan, None, cfg)
        fused, boxes = fuse(features, None, labels, cfg)
        assert boxes == []
        for name, fs in features.all_sets().items():
            assert np.array_equal(fs.indices, fused.all_sets()[name].indices)

    def test_fuse_removes_object_points_from_features(self):
        scan, detections = self._frame_with_detection()
        cfg = PerceptionConfig()
        features, _, labels = perceive(scan, None, cfg)  # extraction unaware of objects
        fused, boxes = fuse(features, detections, labels, cfg)
        object_ids = np.concatenate([d.point_indices for d in detections])
        for name, fs in fused.all_sets().items():
            assert len(np.intersect1d(fs.indices, object_ids)) == 0, name
        # Removed points were exactly the contaminated ones.
        removed = len(features.surface_candidates) - len(fused.surface_candidates)
        contaminated = np.isin(features.surface_candidates.indices, object_ids).sum()
        assert removed == contaminated

    def test_ground_heavy_box_dropped(self):
        scan, detections = self._frame_with_detection()
        cfg = PerceptionConfig()
        _, _, labels = perceive(scan, None, cfg)
        ground_ids = np.nonzero(labels == 1)[0]
        fake = DetectedBox(center=[3.0, 0.0, -1.4], size=[2.0, 2.0, 0.4], yaw=0.0,
                           confidence=0.9, point_indices=ground_ids[:40])
        features, _, _ = perceive(scan, None, cfg)
        _, boxes = fuse(features, [fake], labels, cfg)
        assert boxes == []

    def test_partially_grounded_box_retained(self):
        scan, detections = self._frame_with_detection()
        cfg = PerceptionConfig()
        _, _, labels = perceive(scan, None, cfg)
        det = detections[0]
        ground_ids = np.nonzero(labels == 1)[0][:5]
        mixed = DetectedBox(center=det.center, size=det.size, yaw=det.yaw, confidence=det.confidence,
                            point_indices=np.concatenate([det.point_indices, ground_ids]))
        features, _, _ = perceive(scan, None, cfg)
        _, boxes = fuse(features, [mixed], labels, cfg)
        assert len(boxes) == 1
        assert len(np.intersect1d(boxes[0].point_indices, ground_ids)) == 0


def test_debug_csv_dump(tmp_path, room_frame):
    _, _, scan = room_frame
    cfg = PerceptionConfig()
    labels, _ = fit_ground(scan, cfg)
    containers = assign_times_and_segment(scan, labels, cfg)
    smooth = compute_smoothness(scan, containers, cfg)
    path = tmp_path / "debug.csv"
    dump_debug_csv(path, scan, labels, smooth, None)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,z,label,smoothness,object_id"
    assert len(lines) == len(scan) + 1
