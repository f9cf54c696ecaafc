import json
import os

import numpy as np
import pytest

from lidarmot.dataset import (
    DetectedBox,
    LidarScan,
    SequenceError,
    read_sequence,
    write_sequence,
)
from lidarmot.simulate import BoxNoiseConfig, ScannerConfig, scene_setup, simulate_sequence


@pytest.fixture(scope="module")
def generated_sequence():
    world, ego = scene_setup("crossing", ego_speed=2.0)
    return simulate_sequence(
        world, ego, 4,
        ScannerConfig(num_rings=8, azimuth_steps=240, range_noise_sigma=0.01),
        BoxNoiseConfig(center_sigma=0.05),
        seed=3,
    )


def assert_sequences_equal(a, b):
    assert len(a) == len(b)
    assert a.frame_period == b.frame_period
    for sa, sb in zip(a.scans, b.scans):
        assert np.array_equal(sa.points, sb.points)
        assert np.array_equal(sa.rel_time, sb.rel_time)
        assert np.array_equal(sa.ring, sb.ring)
        assert sa.timestamp == sb.timestamp
        assert np.array_equal(sa.gt_object_ids, sb.gt_object_ids)
    assert (a.detections is None) == (b.detections is None)
    if a.detections is not None:
        for da, db in zip(a.detections, b.detections):
            assert len(da) == len(db)
            for boxa, boxb in zip(da, db):
                assert np.array_equal(boxa.center, boxb.center)
                assert np.array_equal(boxa.size, boxb.size)
                assert boxa.yaw == boxb.yaw
                assert boxa.confidence == boxb.confidence
                assert np.array_equal(boxa.point_indices, boxb.point_indices)
                assert boxa.gt_id == boxb.gt_id
    assert np.array_equal(a.ego_truth, b.ego_truth)
    assert set(a.object_truth) == set(b.object_truth)
    for key in a.object_truth:
        assert np.array_equal(a.object_truth[key], b.object_truth[key])


def test_round_trip_bit_identical(tmp_path, generated_sequence):
    directory = tmp_path / "seq"
    write_sequence(directory, generated_sequence)
    loaded = read_sequence(directory)
    assert_sequences_equal(generated_sequence, loaded)
    # And a second write produces byte-identical files.
    second = tmp_path / "seq2"
    write_sequence(second, loaded)
    for name in ("manifest.json", "scans/000000.bin", "detections/000000.json", "gt/ego.tum"):
        assert (directory / name).read_bytes() == (second / name).read_bytes()


def test_missing_manifest(tmp_path):
    with pytest.raises(SequenceError, match="missing manifest"):
        read_sequence(tmp_path)


def test_manifest_referencing_absent_frame(tmp_path, generated_sequence):
    directory = tmp_path / "seq"
    write_sequence(directory, generated_sequence)
    victim = directory / "scans" / "000002.bin"
    os.remove(victim)
    with pytest.raises(SequenceError, match="000002.bin"):
        read_sequence(directory)


def test_truncated_scan_reports_offset(tmp_path, generated_sequence):
    directory = tmp_path / "seq"
    write_sequence(directory, generated_sequence)
    victim = directory / "scans" / "000001.bin"
    payload = victim.read_bytes()
    victim.write_bytes(payload[: len(payload) - 5])
    with pytest.raises(SequenceError, match="offset"):
        read_sequence(directory)


def test_corrupt_manifest_json(tmp_path, generated_sequence):
    directory = tmp_path / "seq"
    write_sequence(directory, generated_sequence)
    (directory / "manifest.json").write_text("{not json")
    with pytest.raises(SequenceError, match="invalid JSON"):
        read_sequence(directory)


def test_sequence_without_detections(tmp_path, generated_sequence):
    directory = tmp_path / "seq"
    write_sequence(directory, generated_sequence)
    manifest = json.loads((directory / "manifest.json").read_text())
    manifest["has_detections"] = False
    (directory / "manifest.json").write_text(json.dumps(manifest))
    loaded = read_sequence(directory)
    assert loaded.detections is None


def test_detected_box_validation():
    with pytest.raises(ValueError, match="size"):
        DetectedBox(center=[0, 0, 0], size=[1, -1, 1], yaw=0, confidence=0.5, point_indices=[])
    with pytest.raises(ValueError, match="confidence"):
        DetectedBox(center=[0, 0, 0], size=[1, 1, 1], yaw=0, confidence=1.5, point_indices=[])


def test_detected_box_contains():
    box = DetectedBox(center=[1, 0, 0], size=[2, 1, 1], yaw=np.pi / 2, confidence=1.0, point_indices=[])
    # After a 90 degree yaw the long axis lies along y.
    inside = box.contains(np.array([[1.0, 0.9, 0.0], [1.9, 0.0, 0.0]]))
    assert inside.tolist() == [True, False]


def test_scan_length_validation():
    with pytest.raises(ValueError, match="equal length"):
        LidarScan(
            points=np.zeros((3, 3)), rel_time=np.zeros(2), ring=np.zeros(3, dtype=np.uint16),
            timestamp=0.1, frame_index=0,
        )
