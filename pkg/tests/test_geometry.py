import math

import numpy as np
import pytest

from lidarmot.geometry import (
    Pose,
    TimedPoint,
    apply_interpolated,
    compose,
    euler_rotation_derivatives,
    interpolate_increment,
    pose_to_tum_row,
    read_tum,
    transform_point,
    tum_row_to_pose,
    wrap_angle,
    write_tum,
)


def rz(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pose = Pose.exp(rng.normal(size=6))
        assert np.allclose(compose(Pose.identity(), pose).matrix(), pose.matrix())
        round_trip = compose(pose, pose.inverse())
        assert np.linalg.norm(round_trip.matrix() - np.eye(4)) < 1e-9


def test_compose_matches_homogeneous_matrix_product():
    # Oracle: plain 4x4 matrix multiplication.
    a = Pose(rz(90), np.array([1.0, 0.0, 0.0]))
    b = Pose(rz(90), np.zeros(3))
    expected = a.matrix() @ b.matrix()
    result = compose(a, b)
    assert np.allclose(result.matrix(), expected, atol=1e-12)
    assert np.allclose(result.rotation, rz(180), atol=1e-12)
    assert np.allclose(result.translation, [1.0, 0.0, 0.0], atol=1e-12)


def test_compose_associative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (Pose.exp(rng.normal(size=6)) for _ in range(3))
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        assert np.allclose(left.matrix(), right.matrix(), atol=1e-12)


def test_rotation_orthonormality_invariant():
    rng = np.random.default_rng(2)
    for _ in range(100):
        pose = Pose.exp(rng.normal(size=6) * 2.0)
        gram = pose.rotation @ pose.rotation.T
        assert np.linalg.norm(gram - np.eye(3)) <= 1e-9
        assert abs(np.linalg.det(pose.rotation) - 1.0) <= 1e-9


def test_transform_point_examples():
    assert np.allclose(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])
    shift = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    assert np.allclose(transform_point(shift, [0, 0, 0]), [1, 0, 0])
    # Oracle: direct rotation-matrix product.
    rot = Pose(rz(90), np.zeros(3))
    assert np.allclose(transform_point(rot, [1, 0, 0]), rz(90) @ [1, 0, 0], atol=1e-12)
    assert np.allclose(transform_point(rot, [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_transform_preserves_pairwise_distances():
    rng = np.random.default_rng(3)
    points = rng.normal(size=(20, 3))
    pose = Pose.exp(rng.normal(size=6))
    moved = pose.apply(points)
    before = np.linalg.norm(points[:, None] - points[None, :], axis=2)
    after = np.linalg.norm(moved[:, None] - moved[None, :], axis=2)
    assert np.abs(before - after).max() < 1e-9


def test_interpolate_boundaries():
    rng = np.random.default_rng(4)
    increment = Pose.exp(rng.normal(size=6) * 0.3)
    at_end = interpolate_increment(increment, 1.0, 0.0, 1.0)
    assert np.linalg.norm(at_end.matrix() - np.eye(4)) < 1e-9
    at_start = interpolate_increment(increment, 0.0, 0.0, 1.0)
    assert np.linalg.norm(at_start.matrix() - increment.matrix()) < 1e-9


def test_interpolate_pure_translation_half():
    increment = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    half = interpolate_increment(increment, 0.5, 0.0, 1.0)
    assert np.allclose(half.translation, [0.5, 0.0, 0.0], atol=1e-12)
    assert np.allclose(half.rotation, np.eye(3), atol=1e-12)


def test_interpolate_degenerate_interval_raises():
    with pytest.raises(ValueError):
        interpolate_increment(Pose.identity(), 0.5, 1.0, 1.0)
    with pytest.raises(ValueError):
        interpolate_increment(Pose.identity(), 2.0, 0.0, 1.0)


def test_one_parameter_subgroup_property():
    rng = np.random.default_rng(5)
    for _ in range(30):
        increment = Pose.exp(rng.normal(size=6) * 0.5)
        a, b = rng.uniform(0.0, 0.5, size=2)
        combined = increment.power(a).compose(increment.power(b))
        direct = increment.power(a + b)
        assert np.linalg.norm(combined.matrix() - direct.matrix()) < 1e-9


def test_exp_log_round_trip():
    rng = np.random.default_rng(6)
    for _ in range(200):
        pose = Pose.exp(rng.normal(size=6) * rng.uniform(0.0, 2.0))
        again = Pose.exp(pose.log())
        assert np.linalg.norm(again.matrix() - pose.matrix()) < 1e-9


def test_log_near_pi_rotation():
    axis = np.array([0.3, -0.5, 0.8])
    axis /= np.linalg.norm(axis)
    for eps in (1e-4, 1e-7, 1e-10, 0.0):
        pose = Pose.exp(np.concatenate([[0.1, 0.2, -0.3], axis * (math.pi - eps)]))
        again = Pose.exp(pose.log())
        assert np.linalg.norm(again.matrix() - pose.matrix()) < 1e-8


def test_apply_interpolated_matches_scalar_powers():
    rng = np.random.default_rng(7)
    increment = Pose.exp(rng.normal(size=6) * 0.4)
    points = rng.normal(size=(12, 3))
    alphas = rng.uniform(-1.0, 1.0, size=12)
    batch = apply_interpolated(increment, alphas, points)
    for j in range(12):
        expected = increment.power(alphas[j]).apply(points[j])
        assert np.allclose(batch[j], expected, atol=1e-10)


def test_euler_rotation_derivatives_match_numeric():
    rng = np.random.default_rng(8)
    for _ in range(10):
        roll, pitch, yaw = rng.uniform(-1.0, 1.0, size=3)
        rot, derivs = euler_rotation_derivatives(roll, pitch, yaw)
        assert np.allclose(rot, Pose.from_components(0, 0, 0, roll, pitch, yaw).rotation)
        h = 1e-7
        for k, name in enumerate(("roll", "pitch", "yaw")):
            args_plus = [roll, pitch, yaw]
            args_minus = [roll, pitch, yaw]
            args_plus[k] += h
            args_minus[k] -= h
            numeric = (
                Pose.from_components(0, 0, 0, *args_plus).rotation
                - Pose.from_components(0, 0, 0, *args_minus).rotation
            ) / (2 * h)
            assert np.abs(derivs[k] - numeric).max() < 1e-6, name


def test_components_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(50):
        values = rng.uniform(-1.2, 1.2, size=6)
        pose = Pose.from_components(*values)
        assert np.allclose(pose.to_components(), values, atol=1e-10)


def test_timed_point_validation():
    point = TimedPoint(position=[1.0, 2.0, 3.0], rel_time=0.25, ring=3)
    assert point.ring == 3
    with pytest.raises(ValueError):
        TimedPoint(position=[0, 0, 0], rel_time=1.5, ring=0)


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.3) == pytest.approx(0.3)


def test_tum_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    rows = [(0.1 * i, Pose.exp(rng.normal(size=6) * 0.3)) for i in range(8)]
    path = tmp_path / "traj.tum"
    write_tum(path, rows, fmt="%.17g")
    loaded = read_tum(path)
    assert loaded.shape == (8, 3 + 4 + 1)
    for (t, pose), row in zip(rows, loaded):
        t2, pose2 = tum_row_to_pose(row)
        assert t2 == pytest.approx(t)
        assert np.linalg.norm(pose2.matrix() - pose.matrix()) < 1e-9
    # Written rows round-trip exactly at full precision.
    original = np.array([pose_to_tum_row(t, p) for t, p in rows])
    assert np.array_equal(original, loaded)


def test_tum_rejects_malformed_line(tmp_path):
    path = tmp_path / "bad.tum"
    path.write_text("0.0 1 2 3 0 0 0\n")
    with pytest.raises(ValueError, match="expected 8 fields"):
        read_tum(path)
