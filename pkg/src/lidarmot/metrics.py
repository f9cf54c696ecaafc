"""Trajectory accuracy metrics: ATE after rigid alignment, and relative
translation/rotation errors per frame (ego) or per meter traveled (objects).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, tum_row_to_pose


class MetricsError(Exception):
    pass


@dataclass
class TrajectoryMetrics:
    ate_rmse: float
    rte: float
    rre: float
    matched_poses: int
    mode: str

    def units(self) -> dict[str, str]:
        if self.mode == "ego":
            return {"ate_rmse": "m", "rte": "m/frame", "rre": "deg/frame"}
        return {"ate_rmse": "m", "rte": "m/m", "rre": "deg/m"}


def _as_stamped_poses(trajectory) -> list[tuple[float, Pose]]:
    result = []
    for entry in trajectory:
        if isinstance(entry, (tuple, list)) and isinstance(entry[1], Pose):
            result.append((float(entry[0]), entry[1]))
        else:
            result.append(tum_row_to_pose(np.asarray(entry)))
    return result


def match_timestamps(
    est: list[tuple[float, Pose]], ref: list[tuple[float, Pose]], tol: float = 1e-6
) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching within a tolerance."""
    ref_times = np.array([t for t, _ in ref])
    pairs = []
    for i, (t, _) in enumerate(est):
        j = int(np.argmin(np.abs(ref_times - t)))
        if abs(ref_times[j] - t) <= tol:
            pairs.append((i, j))
    return pairs


def align_rigid(source: np.ndarray, target: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping source points onto target."""
    src_mean = source.mean(axis=0)
    dst_mean = target.mean(axis=0)
    cross = (target - dst_mean).T @ (source - src_mean)
    u, _, vt = np.linalg.svd(cross)
    det = np.linalg.det(u @ vt)
    rot = u @ np.diag([1.0, 1.0, float(np.sign(det))]) @ vt
    return Pose(rot, dst_mean - rot @ src_mean)


def evaluate(estimate, reference, mode: str = "ego", time_tol: float = 1e-6) -> TrajectoryMetrics:
    """Compare an estimated trajectory to a reference.

    ATE is the RMSE of translational residuals after SE(3) alignment of the
    estimate onto the reference. Relative errors are computed over
    consecutive matched pose pairs: per frame for ego trajectories, and
    normalized by the reference path length for object trajectories.
    """
    if mode not in ("ego", "object"):
        raise MetricsError(f"unknown evaluation mode: {mode}")
    est = _as_stamped_poses(estimate)
    ref = _as_stamped_poses(reference)
    pairs = match_timestamps(est, ref, time_tol)
    if len(pairs) < 2:
        raise MetricsError(f"need at least 2 timestamp-matched poses, got {len(pairs)}")

    est_xyz = np.array([est[i][1].translation for i, _ in pairs])
    ref_xyz = np.array([ref[j][1].translation for _, j in pairs])
    alignment = align_rigid(est_xyz, ref_xyz)
    residuals = alignment.apply(est_xyz) - ref_xyz
    ate = float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))

    trans_errors = []
    rot_errors = []
    path_length = 0.0
    for (i0, j0), (i1, j1) in zip(pairs[:-1], pairs[1:]):
        est_rel = est[i0][1].inverse().compose(est[i1][1])
        ref_rel = ref[j0][1].inverse().compose(ref[j1][1])
        error = ref_rel.inverse().compose(est_rel)
        trans_errors.append(float(np.linalg.norm(error.translation)))
        rot_errors.append(math.degrees(error.rotation_angle()))
        path_length += float(np.linalg.norm(ref_rel.translation))

    if mode == "ego":
        rte = float(np.mean(trans_errors))
        rre = float(np.mean(rot_errors))
    else:
        denom = max(path_length, 1e-9)
        rte = float(np.sum(trans_errors) / denom)
        rre = float(np.sum(rot_errors) / denom)
    return TrajectoryMetrics(
        ate_rmse=ate, rte=rte, rre=rre, matched_poses=len(pairs), mode=mode
    )
