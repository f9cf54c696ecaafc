"""Long-term static map, scan-to-map ego correction, and the 4D object map.

The static map holds three voxel-downsampled clouds (ground, edge, surface)
in the map frame, anchored at the first frame. Each frame's distortion-free
candidates are matched to the map to correct the drifting odometry pose; the
resulting correction also lifts object trajectories into the map frame.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, euler_rotation_derivatives
from .voxels import voxel_codes

_PARAMS_ALL = (0, 1, 2, 3, 4, 5)


@dataclass
class MappingConfig:
    ground_voxel: float = 0.4
    surface_voxel: float = 0.4
    edge_voxel: float = 0.2
    crop_radius: float = 60.0
    correspondence_gate: float = 1.0
    lm_max_iterations: int = 8
    lm_init_lambda: float = 1e-4
    lm_tolerance: float = 1e-6
    min_matches: int = 30
    condition_limit: float = 1e8
    insert_every: int = 1
    max_matches_per_class: int = 700
    reassociate_motion: float = 0.05


class VoxelCloud:
    """Downsampled point cloud: at most one representative point per voxel.

    Tracks how many inserted points carried a dynamic-object label, which
    gives the map-contamination oracle for simulated sequences.
    """

    def __init__(self, voxel_size: float):
        self.voxel_size = voxel_size
        self.points = np.empty((0, 3))
        self._codes: set[int] = set()
        self._tree: cKDTree | None = None
        self.contaminated_points = 0

    def __len__(self) -> int:
        return len(self.points)

    def insert(self, points: np.ndarray, object_labels: np.ndarray | None = None) -> int:
        """Insert points whose voxel is still empty; returns how many landed."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            return 0
        codes = voxel_codes(points, self.voxel_size)
        fresh = []
        for i, code in enumerate(codes):
            if int(code) in self._codes:
                continue
            self._codes.add(int(code))
            fresh.append(i)
        if not fresh:
            return 0
        fresh = np.array(fresh, dtype=np.int64)
        self.points = np.vstack([self.points, points[fresh]])
        if object_labels is not None:
            self.contaminated_points += int(np.sum(np.asarray(object_labels)[fresh] >= 0))
        self._tree = None
        return len(fresh)

    def tree(self) -> cKDTree | None:
        if len(self.points) == 0:
            return None
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def cropped_tree(self, center: np.ndarray, radius: float) -> cKDTree | None:
        full = self.tree()
        if full is None:
            return None
        idx = full.query_ball_point(center, radius)
        if len(idx) < 5:
            return None
        if len(idx) == len(self.points):
            return full
        return cKDTree(self.points[np.asarray(idx, dtype=np.int64)])


@dataclass
class StaticMap:
    ground: VoxelCloud
    edge: VoxelCloud
    surface: VoxelCloud

    @staticmethod
    def create(cfg: MappingConfig) -> "StaticMap":
        return StaticMap(
            ground=VoxelCloud(cfg.ground_voxel),
            edge=VoxelCloud(cfg.edge_voxel),
            surface=VoxelCloud(cfg.surface_voxel),
        )

    def is_empty(self) -> bool:
        return len(self.ground) + len(self.edge) + len(self.surface) == 0

    def contamination(self) -> int:
        return (
            self.ground.contaminated_points
            + self.edge.contaminated_points
            + self.surface.contaminated_points
        )


@dataclass
class FrameCandidates:
    """Distortion-free candidate clouds of one frame, in that frame's
    reference coordinates, with optional per-point ground-truth labels."""

    ground: np.ndarray
    edge: np.ndarray
    surface: np.ndarray
    ground_labels: np.ndarray | None = None
    edge_labels: np.ndarray | None = None
    surface_labels: np.ndarray | None = None


def _plane_residuals(points: np.ndarray, tree: cKDTree | None, pose: Pose, gate: float):
    if tree is None or len(points) == 0 or len(tree.data) < 5:
        return None
    moved = pose.apply(points)
    dists, idx = tree.query(moved, k=5, workers=-1)
    neighbors = np.asarray(tree.data)[idx]
    means = neighbors.mean(axis=1)
    centered = neighbors - means[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / 5.0
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    flatness = np.abs(np.einsum("nki,ni->nk", centered, normals)).max(axis=1)
    tol = max(3.0 * float(np.median(flatness)), 0.05)
    oriented = eigvals[:, 1] > 9.0 * np.maximum(eigvals[:, 0], 1e-12)
    ok = (dists[:, 0] <= gate) & (flatness <= tol) & oriented
    if not ok.any():
        return None
    scales = 1.0 / np.maximum(flatness[ok], 0.01)
    return points[ok], normals[ok], means[ok], scales


def _line_residuals(points: np.ndarray, tree: cKDTree | None, pose: Pose, gate: float):
    if tree is None or len(points) == 0 or len(tree.data) < 5:
        return None
    moved = pose.apply(points)
    dists, idx = tree.query(moved, k=5, workers=-1)
    neighbors = np.asarray(tree.data)[idx]
    means = neighbors.mean(axis=1)
    centered = neighbors - means[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / 5.0
    eigvals, eigvecs = np.linalg.eigh(cov)
    directions = eigvecs[:, :, 2]
    off_axis = np.sqrt(np.maximum(eigvals[:, 1], 0.0))
    ok = (
        (dists[:, 0] <= gate)
        & (off_axis <= max(3.0 * float(np.median(off_axis)), 0.1))
        & (eigvals[:, 2] > 3.0 * np.maximum(eigvals[:, 1], 1e-12))
    )
    if not ok.any():
        return None
    scales = 1.0 / np.maximum(off_axis[ok], 0.1)
    return points[ok], directions[ok], means[ok], scales


def _subsample(points: np.ndarray, cap: int) -> np.ndarray:
    if len(points) <= cap:
        return points
    stride = int(np.ceil(len(points) / cap))
    return points[::stride]


class _MapAlignment:
    """Scan-to-map correspondences at a fixed association."""

    def __init__(self, candidates: FrameCandidates, trees: dict, pose: Pose, cfg: MappingConfig):
        gate = cfg.correspondence_gate
        cap = cfg.max_matches_per_class
        self.plane_sets = []
        for pts, tree in (
            (_subsample(candidates.ground, cap), trees["ground"]),
            (_subsample(candidates.surface, cap), trees["surface"]),
        ):
            built = _plane_residuals(pts, tree, pose, gate)
            if built is not None:
                self.plane_sets.append(built)
        self.line_set = _line_residuals(
            _subsample(candidates.edge, cap), trees["edge"], pose, gate
        )

    def count(self) -> int:
        total = sum(len(p[0]) for p in self.plane_sets)
        if self.line_set is not None:
            total += len(self.line_set[0])
        return total

    def residuals(self, params: np.ndarray) -> np.ndarray:
        pose = Pose.from_components(*params)
        parts = []
        for pts, normals, anchors, scales in self.plane_sets:
            moved = pose.apply(pts)
            parts.append(scales * np.sum(normals * (moved - anchors), axis=1))
        if self.line_set is not None:
            pts, directions, anchors, scales = self.line_set
            moved = pose.apply(pts)
            offsets = moved - anchors
            parts.append(scales * np.linalg.norm(np.cross(offsets, directions), axis=1))
        if not parts:
            return np.empty(0)
        return np.concatenate(parts)

    def linearize(self, params: np.ndarray):
        """Residuals and analytic Jacobian over all six pose parameters."""
        _, rot_derivs = euler_rotation_derivatives(params[3], params[4], params[5])
        pose = Pose.from_components(*params)
        res_parts = []
        jac_parts = []
        for pts, normals, anchors, scales in self.plane_sets:
            moved = pose.apply(pts)
            res_parts.append(scales * np.sum(normals * (moved - anchors), axis=1))
            jac = np.empty((len(pts), 6))
            jac[:, :3] = scales[:, None] * normals
            for p in range(3):
                jac[:, 3 + p] = scales * np.sum(normals * (pts @ rot_derivs[p].T), axis=1)
            jac_parts.append(jac)
        if self.line_set is not None:
            pts, directions, anchors, scales = self.line_set
            moved = pose.apply(pts)
            offsets = moved - anchors
            cross = np.cross(offsets, directions)
            norms = np.maximum(np.linalg.norm(cross, axis=1), 1e-12)
            res_parts.append(scales * norms)
            unit = cross / norms[:, None]
            jac = np.empty((len(pts), 6))
            for p in range(3):
                step = np.zeros(3)
                step[p] = 1.0
                jac[:, p] = scales * np.sum(
                    unit * np.cross(np.broadcast_to(step, pts.shape), directions), axis=1
                )
            for p in range(3):
                jac[:, 3 + p] = scales * np.sum(
                    unit * np.cross(pts @ rot_derivs[p].T, directions), axis=1
                )
            jac_parts.append(jac)
        if not res_parts:
            return np.empty(0), np.empty((0, 6))
        return np.concatenate(res_parts), np.vstack(jac_parts)


def map_refine(
    candidates: FrameCandidates,
    odom_pose: Pose,
    static_map: StaticMap,
    prev_correction: Pose,
    cfg: MappingConfig,
    insert: bool = True,
) -> tuple[Pose, bool]:
    """Scan-to-map LM refinement of the ego pose, then map insertion.

    Returns (map-frame pose, refined flag). On the first frame or on
    optimization failure the dead-reckoned pose prev_correction o odom_pose is
    used; failed frames are not inserted.
    """
    predicted = prev_correction.compose(odom_pose)
    if static_map.is_empty():
        if insert:
            _insert_frame(candidates, predicted, static_map)
        return predicted, True

    center = predicted.translation
    trees = {
        "ground": static_map.ground.cropped_tree(center, cfg.crop_radius),
        "edge": static_map.edge.cropped_tree(center, cfg.crop_radius),
        "surface": static_map.surface.cropped_tree(center, cfg.crop_radius),
    }
    params = predicted.to_components()
    lam = cfg.lm_init_lambda
    ok = False
    alignment = None
    built_at = None
    for _ in range(cfg.lm_max_iterations):
        if alignment is None or np.linalg.norm(params - built_at) > cfg.reassociate_motion:
            alignment = _MapAlignment(candidates, trees, Pose.from_components(*params), cfg)
            built_at = params.copy()
        if alignment.count() < cfg.min_matches:
            break
        residuals, jac = alignment.linearize(params)
        cost = float(residuals @ residuals)
        jtj = jac.T @ jac
        eigvals = np.linalg.eigvalsh(jtj)
        if eigvals[-1] <= 0 or eigvals[-1] / max(eigvals[0], 1e-300) > cfg.condition_limit:
            break
        try:
            delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)), -jac.T @ residuals)
        except np.linalg.LinAlgError:
            break
        trial = params.copy()
        trial += delta
        if alignment.residuals(trial) @ alignment.residuals(trial) < cost:
            params = trial
            lam = max(lam / 10.0, 1e-12)
        else:
            lam *= 10.0
        if np.linalg.norm(delta) < cfg.lm_tolerance:
            ok = True
            break
    refined = Pose.from_components(*params) if ok else predicted
    if insert and ok:
        _insert_frame(candidates, refined, static_map)
    return refined, ok


def _insert_frame(candidates: FrameCandidates, pose: Pose, static_map: StaticMap) -> None:
    static_map.ground.insert(pose.apply(candidates.ground), candidates.ground_labels)
    static_map.edge.insert(pose.apply(candidates.edge), candidates.edge_labels)
    static_map.surface.insert(pose.apply(candidates.surface), candidates.surface_labels)


def compute_correction(odom_pose: Pose, map_pose: Pose) -> Pose:
    """Correction taking odom-frame poses into the map frame."""
    return map_pose.compose(odom_pose.inverse())


@dataclass
class SemanticMap4D:
    """Per-object map-frame trajectory entries plus the correction history."""

    entries: dict[int, list[dict]] = field(default_factory=dict)
    corrections: list[tuple[int, Pose]] = field(default_factory=list)

    def record_correction(self, frame: int, correction: Pose) -> None:
        self.corrections.append((frame, correction))

    def correct_objects(
        self,
        frame: int,
        timestamp: float,
        correction: Pose,
        object_states: list[tuple[int, Pose, np.ndarray]],
    ) -> None:
        """Append map-frame poses T_map_object = correction o T_odom_object."""
        for object_id, odom_pose, size in object_states:
            map_pose = correction.compose(odom_pose)
            self.entries.setdefault(object_id, []).append(
                {
                    "frame": frame,
                    "t": timestamp,
                    "pose": map_pose,
                    "size": [float(v) for v in size],
                }
            )

    def export_json(self, path: str | os.PathLike) -> None:
        payload = []
        for object_id in sorted(self.entries):
            frames = []
            for entry in self.entries[object_id]:
                pose: Pose = entry["pose"]
                quat = pose.quaternion_xyzw()
                frames.append(
                    {
                        "frame": entry["frame"],
                        "t": entry["t"],
                        "pose": {
                            "translation": [float(v) for v in pose.translation],
                            "quaternion_xyzw": [float(v) for v in quat],
                        },
                        "size": entry["size"],
                    }
                )
            payload.append({"object_id": object_id, "frames": frames})
        with open(path, "w") as handle:
            json.dump(payload, handle, indent=1)
