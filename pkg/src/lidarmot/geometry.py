"""Rigid transforms on SE(3), constant-twist interpolation, and TUM trajectory I/O.

Conventions used across the package:

* A pose maps points from its own (child) frame into the parent frame:
  ``y = R @ x + t``.
* The frame-to-frame ego increment maps current-frame coordinates into
  previous-frame coordinates, so poses accumulate by right-composition.
* A lidar sweep is stamped at its end; a point with ``rel_time`` u in [0, 1]
  was emitted a fraction ``1 - u`` of a frame period before the stamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-10


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues rotation from a rotation vector."""
    theta = np.linalg.norm(omega)
    if theta < _SMALL_ANGLE:
        skew = _skew(omega)
        return np.eye(3) + skew + 0.5 * (skew @ skew)
    axis_skew = _skew(omega / theta)
    return (
        np.eye(3)
        + math.sin(theta) * axis_skew
        + (1.0 - math.cos(theta)) * (axis_skew @ axis_skew)
    )


def _so3_log(rotation: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, stable near 0 and pi."""
    trace = rotation[0, 0] + rotation[1, 1] + rotation[2, 2]
    cos_angle = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    vee = np.array(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    )
    sin_angle = 0.5 * np.linalg.norm(vee)
    angle = math.atan2(sin_angle, cos_angle)
    if angle < 1e-9:
        return 0.5 * vee
    if sin_angle > 1e-6 or cos_angle > 0.0:
        return (0.5 * angle / max(sin_angle, 1e-300)) * vee
    # Near pi: the antisymmetric part vanishes, but the outer product of the
    # axis with itself is recovered exactly from the symmetric part.
    outer = (0.5 * (rotation + rotation.T) - cos_angle * np.eye(3)) / (1.0 - cos_angle)
    column = int(np.argmax(np.diag(outer)))
    axis = outer[:, column]
    axis = axis / np.linalg.norm(axis)
    if vee @ axis < 0.0:
        axis = -axis
    return angle * axis


@dataclass(frozen=True)
class Pose:
    """SE(3) rigid transform stored as a rotation matrix and a translation.

    Instances are immutable values: the wrapped arrays are copies with the
    writeable flag cleared, so poses can be shared freely between threads.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=float)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be a 3x3 matrix")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return Pose(matrix[:3, :3], matrix[:3, 3])

    @staticmethod
    def from_components(
        tx: float, ty: float, tz: float, roll: float, pitch: float, yaw: float
    ) -> "Pose":
        """Build a pose with rotation Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
        cr, sr = math.cos(roll), math.sin(roll)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cy, sy = math.cos(yaw), math.sin(yaw)
        rot = np.array(
            [
                [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
                [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
                [-sp, cp * sr, cp * cr],
            ]
        )
        return Pose(rot, np.array([tx, ty, tz]))

    def to_components(self) -> np.ndarray:
        """Return [tx, ty, tz, roll, pitch, yaw] for the ZYX euler convention."""
        yaw, pitch, roll = Rotation.from_matrix(self.rotation).as_euler("ZYX")
        return np.array([*self.translation, roll, pitch, yaw])

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "Pose") -> "Pose":
        """Return self applied after other in the parent frame: self o other."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rot_inv = self.rotation.T
        return Pose(rot_inv, -rot_inv @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single point (3,) or a stack of points (N, 3)."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def log(self) -> np.ndarray:
        """Twist [rho, omega] such that exp(log(P)) == P. Cached per instance."""
        cached = self.__dict__.get("_twist")
        if cached is not None:
            return cached
        omega = _so3_log(self.rotation)
        theta = np.linalg.norm(omega)
        if theta < _SMALL_ANGLE:
            v_inv = np.eye(3) - 0.5 * _skew(omega)
        else:
            axis_skew = _skew(omega / theta)
            half = 0.5 * theta
            coeff = 1.0 - half * math.cos(half) / math.sin(half)
            v_inv = np.eye(3) - half * axis_skew + coeff * (axis_skew @ axis_skew)
        twist = np.concatenate([v_inv @ self.translation, omega])
        twist.setflags(write=False)
        object.__setattr__(self, "_twist", twist)
        return twist

    @staticmethod
    def exp(twist: np.ndarray) -> "Pose":
        """Exponential map from a twist [rho, omega] to a pose."""
        twist = np.asarray(twist, dtype=float).reshape(6)
        rho, omega = twist[:3], twist[3:]
        theta = np.linalg.norm(omega)
        rot = _so3_exp(omega)
        if theta < _SMALL_ANGLE:
            v_mat = np.eye(3) + 0.5 * _skew(omega)
        else:
            axis_skew = _skew(omega / theta)
            v_mat = (
                np.eye(3)
                + ((1.0 - math.cos(theta)) / theta) * axis_skew
                + ((theta - math.sin(theta)) / theta) * (axis_skew @ axis_skew)
            )
        return Pose(rot, v_mat @ rho)

    def power(self, alpha: float) -> "Pose":
        """Constant-twist fraction of the transform: exp(alpha * log(self))."""
        return Pose.exp(alpha * self.log())

    def rotation_angle(self) -> float:
        """Magnitude of the rotation in radians."""
        return float(np.linalg.norm(_so3_log(self.rotation)))

    def quaternion_xyzw(self) -> np.ndarray:
        quat = Rotation.from_matrix(self.rotation).as_quat()
        if quat[3] < 0.0:
            quat = -quat
        return quat

    @staticmethod
    def from_quaternion(xyzw: np.ndarray, translation: np.ndarray) -> "Pose":
        return Pose(Rotation.from_quat(np.asarray(xyzw, dtype=float)).as_matrix(), translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        gram = self.rotation @ self.rotation.T
        return (
            np.linalg.norm(gram - np.eye(3)) <= tol
            and abs(np.linalg.det(self.rotation) - 1.0) <= 10.0 * tol
            and bool(np.all(np.isfinite(self.translation)))
        )


@dataclass(frozen=True)
class TimedPoint:
    """One lidar return: position in the sensor frame, sweep fraction, scan line."""

    position: np.ndarray
    rel_time: float
    ring: int

    def __post_init__(self) -> None:
        pos = np.array(self.position, dtype=float).reshape(3)
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)
        if not 0.0 <= self.rel_time <= 1.0:
            raise ValueError(f"rel_time must lie in [0, 1], got {self.rel_time}")


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def transform_point(pose: Pose, point: np.ndarray) -> np.ndarray:
    return pose.apply(point)


def interpolate_increment(
    increment: Pose, t_k: float, t_start: float, t_end: float
) -> Pose:
    """Constant-twist interpolation of a frame-to-frame increment.

    Returns exp(alpha * log(increment)) with alpha = (t_k - t_end) / (t_start - t_end),
    so the full increment applies at t_start and the identity at t_end.
    """
    if not t_start < t_end:
        raise ValueError("degenerate interpolation interval: t_start must be < t_end")
    if not t_start <= t_k <= t_end:
        raise ValueError(f"t_k={t_k} outside [{t_start}, {t_end}]")
    alpha = (t_k - t_end) / (t_start - t_end)
    return increment.power(alpha)


def interpolated_rotations(increment: Pose, alphas: np.ndarray) -> np.ndarray:
    """Rotation parts of exp(alpha_j * log(increment)) for a batch of alphas."""
    alphas = np.asarray(alphas, dtype=float)
    twist = increment.log()
    omega = twist[3:]
    theta = np.linalg.norm(omega)
    n = alphas.shape[0]
    if theta < _SMALL_ANGLE:
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    axis_skew = _skew(omega / theta)
    axis_skew_sq = axis_skew @ axis_skew
    phi = alphas * theta
    sin_phi = np.sin(phi)[:, None, None]
    cos_phi = np.cos(phi)[:, None, None]
    return np.eye(3) + sin_phi * axis_skew + (1.0 - cos_phi) * axis_skew_sq


def apply_interpolated(
    increment: Pose, alphas: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """Apply exp(alpha_j * log(increment)) to each point j, vectorized.

    Used for per-point motion-distortion correction: alpha_j is the signed
    fraction of the frame increment accumulated at the point's emission time.
    """
    points = np.asarray(points, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must have shape (N, 3)")
    twist = increment.log()
    rho, omega = twist[:3], twist[3:]
    theta = np.linalg.norm(omega)
    if theta < _SMALL_ANGLE:
        return points + alphas[:, None] * rho
    axis_skew = _skew(omega / theta)
    axis_skew_sq = axis_skew @ axis_skew
    phi = alphas * theta
    sin_phi = np.sin(phi)
    cos_phi = np.cos(phi)

    k_pts = points @ axis_skew.T
    k2_pts = points @ axis_skew_sq.T
    rotated = points + sin_phi[:, None] * k_pts + (1.0 - cos_phi)[:, None] * k2_pts

    # Translation of exp(alpha * xi): V(alpha * omega) @ (alpha * rho).
    scaled_rho = alphas[:, None] * rho
    k_rho = scaled_rho @ axis_skew.T
    k2_rho = scaled_rho @ axis_skew_sq.T
    tiny = np.abs(phi) <= _SMALL_ANGLE
    safe_phi = np.where(tiny, 1.0, phi)
    coeff_a = np.where(tiny, 0.0, (1.0 - cos_phi) / safe_phi)
    coeff_b = np.where(tiny, 0.0, (phi - sin_phi) / safe_phi)
    translation = scaled_rho + coeff_a[:, None] * k_rho + coeff_b[:, None] * k2_rho
    return rotated + translation


def euler_rotation_derivatives(roll: float, pitch: float, yaw: float):
    """Rotation Rz(yaw)Ry(pitch)Rx(roll) and its three partial derivatives.

    Used by the Levenberg-Marquardt solvers for analytic Jacobians over the
    [tx, ty, tz, roll, pitch, yaw] parameterization.
    """
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]], dtype=float)
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]], dtype=float)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]], dtype=float)
    drx = np.array([[0, 0, 0], [0, -sr, -cr], [0, cr, -sr]], dtype=float)
    dry = np.array([[-sp, 0, cp], [0, 0, 0], [-cp, 0, -sp]], dtype=float)
    drz = np.array([[-sy, -cy, 0], [cy, -sy, 0], [0, 0, 0]], dtype=float)
    rotation = rz @ ry @ rx
    d_roll = rz @ ry @ drx
    d_pitch = rz @ dry @ rx
    d_yaw = drz @ ry @ rx
    return rotation, (d_roll, d_pitch, d_yaw)


def pose_to_tum_row(timestamp: float, pose: Pose) -> np.ndarray:
    quat = pose.quaternion_xyzw()
    return np.array([timestamp, *pose.translation, *quat])


def tum_row_to_pose(row: np.ndarray) -> tuple[float, Pose]:
    row = np.asarray(row, dtype=float).reshape(8)
    return float(row[0]), Pose.from_quaternion(row[4:8], row[1:4])


def write_tum(path, stamped_poses, fmt: str = "%.9f") -> None:
    """Write a trajectory as TUM lines: timestamp tx ty tz qx qy qz qw.

    ``stamped_poses`` is an iterable of (timestamp, Pose) pairs or raw
    8-column rows. The default format gives nanosecond/nanometre resolution,
    enough for byte-identical reproduction of identical runs.
    """
    with open(path, "w", encoding="ascii") as handle:
        for entry in stamped_poses:
            if isinstance(entry, (tuple, list)) and isinstance(entry[1], Pose):
                row = pose_to_tum_row(entry[0], entry[1])
            else:
                row = np.asarray(entry, dtype=float).reshape(8)
            handle.write(" ".join(fmt % value for value in row) + "\n")


def read_tum(path) -> np.ndarray:
    """Read a TUM trajectory file into an (N, 8) array of raw rows."""
    rows = []
    with open(path, "r", encoding="ascii") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{line_no}: expected 8 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
    return np.array(rows, dtype=float).reshape(-1, 8)
