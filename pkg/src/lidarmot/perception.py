"""Fusion perception: ground fitting, scan-line segmentation, smoothness
features, and mutual correction between geometry and detected boxes.

Per frame the stages are:

1. iterative-PCA ground fit, labeling every point ground/background,
2. per-ring run-length segmentation into ground and background containers,
3. local smoothness over each segment,
4. feature selection with per-sector quotas, with detected-object points
   excluded from every geometric pool and ground points stripped out of every
   detected box (the mutual correction step).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import DetectedBox, LidarScan
from .voxels import downsample_indices


class GroundFitError(Exception):
    pass


@dataclass
class PerceptionConfig:
    ground_seed_count: int = 200
    ground_iterations: int = 3
    ground_dist_threshold: float = 0.15
    min_run: int = 5
    depth_gap_base: float = 0.3
    depth_gap_factor: float = 0.04
    smoothness_half_width: int = 5
    sectors: int = 6
    max_ground_per_sector: int = 8
    max_edge_per_sector: int = 4
    max_surface_per_sector: int = 20
    ground_smooth_threshold: float = 0.1
    # The smoothness here is normalized by window width and range, so corner
    # values sit near 1e-2 and flat surfaces below 1e-3; the edge gate is
    # calibrated to that scale.
    edge_smooth_threshold: float = 0.01
    surface_smooth_threshold: float = 0.1
    candidate_voxel: float = 0.4
    edge_candidate_voxel: float = 0.2
    min_obj_points: int = 10


# --------------------------------------------------------------------------
# Ground fitting
# --------------------------------------------------------------------------


def fit_ground(
    scan: LidarScan, cfg: PerceptionConfig
) -> tuple[np.ndarray, tuple[np.ndarray, float]]:
    """Iterative PCA plane fit.

    Seeds with the lowest points, fits a plane through the smallest principal
    direction, relabels everything within the distance threshold, and repeats.
    Returns per-point labels (1 ground, 0 background) and the plane as
    (unit normal with positive z, offset) satisfying normal . p = offset.
    """
    points = scan.points.astype(float)
    n = len(points)
    if n < cfg.ground_seed_count:
        raise GroundFitError(
            f"scan has {n} points, fewer than ground_seed_count={cfg.ground_seed_count}"
        )
    seed = np.argpartition(points[:, 2], cfg.ground_seed_count - 1)[: cfg.ground_seed_count]
    mask = np.zeros(n, dtype=bool)
    mask[seed] = True
    normal = np.array([0.0, 0.0, 1.0])
    offset = 0.0
    for _ in range(cfg.ground_iterations):
        subset = points[mask]
        if len(subset) < 3:
            break
        mean = subset.mean(axis=0)
        centered = subset - mean
        cov = centered.T @ centered / len(subset)
        eigvals, eigvecs = np.linalg.eigh(cov)
        normal = eigvecs[:, 0]
        if normal[2] < 0.0:
            normal = -normal
        offset = float(normal @ mean)
        mask = np.abs(points @ normal - offset) <= cfg.ground_dist_threshold
    return mask.astype(np.uint8), (normal, offset)


# --------------------------------------------------------------------------
# Segmentation
# --------------------------------------------------------------------------


@dataclass
class SegmentContainers:
    """Per-ring maximal runs of uniform ground label, as (start, end) positions
    into the ring's time-ordered index array (inclusive ends)."""

    ring_order: list[np.ndarray]
    ground_segments: list[list[tuple[int, int]]]
    background_segments: list[list[tuple[int, int]]]

    def id_pairs(self, container: str, ring: int) -> list[tuple[int, int]]:
        """Head/tail global point ids of each segment in one ring."""
        segments = (
            self.ground_segments if container == "ground" else self.background_segments
        )
        order = self.ring_order[ring]
        return [(int(order[s]), int(order[e])) for s, e in segments[ring]]


def assign_times_and_segment(
    scan: LidarScan, labels: np.ndarray, cfg: PerceptionConfig
) -> SegmentContainers:
    """Split each ring into maximal uniform-label runs, dropping short runs.

    Runs are additionally broken at depth discontinuities, so occlusion
    shadows never masquerade as physical corners in the smoothness windows.
    """
    ring_order = scan.ring_indices()
    points = scan.points.astype(float)
    ground_segments: list[list[tuple[int, int]]] = []
    background_segments: list[list[tuple[int, int]]] = []
    for order in ring_order:
        ground_runs: list[tuple[int, int]] = []
        background_runs: list[tuple[int, int]] = []
        if len(order):
            ring_labels = labels[order]
            ring_pts = points[order]
            breaks = np.diff(ring_labels) != 0
            if len(order) > 1:
                steps = np.linalg.norm(np.diff(ring_pts, axis=0), axis=1)
                ranges = np.linalg.norm(ring_pts, axis=1)
                gap_limit = cfg.depth_gap_base + cfg.depth_gap_factor * np.minimum(
                    ranges[:-1], ranges[1:]
                )
                breaks = breaks | (steps > gap_limit)
            change = np.nonzero(breaks)[0]
            starts = np.concatenate([[0], change + 1])
            ends = np.concatenate([change, [len(order) - 1]])
            for s, e in zip(starts, ends):
                if e - s + 1 < cfg.min_run:
                    continue
                target = ground_runs if ring_labels[s] == 1 else background_runs
                target.append((int(s), int(e)))
        ground_segments.append(ground_runs)
        background_segments.append(background_runs)
    return SegmentContainers(ring_order, ground_segments, background_segments)


# --------------------------------------------------------------------------
# Smoothness
# --------------------------------------------------------------------------


def smoothness_window(window: np.ndarray) -> float:
    """Smoothness of the center point of a (2k+1, 3) window of ring points."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[0] < 3 or window.shape[0] % 2 == 0:
        raise ValueError("window must hold an odd number (>= 3) of points")
    k = window.shape[0] // 2
    center = window[k]
    diff_sum = window.sum(axis=0) - (2 * k + 1) * center
    return float(np.linalg.norm(diff_sum) / (2 * k * np.linalg.norm(center)))


def compute_smoothness(
    scan: LidarScan, containers: SegmentContainers, cfg: PerceptionConfig
) -> np.ndarray:
    """Per-point smoothness, NaN where the window does not fit in a segment."""
    points = scan.points.astype(float)
    smooth = np.full(len(scan), np.nan)
    k = cfg.smoothness_half_width
    width = 2 * k + 1
    for ring, order in enumerate(containers.ring_order):
        for seg_list in (
            containers.ground_segments[ring],
            containers.background_segments[ring],
        ):
            for s, e in seg_list:
                length = e - s + 1
                if length < width:
                    continue
                idx = order[s : e + 1]
                pts = points[idx]
                csum = np.vstack([np.zeros(3), np.cumsum(pts, axis=0)])
                centers = pts[k : length - k]
                window_sums = csum[width:] - csum[: length - width + 1]
                diff = window_sums - width * centers
                norms = np.linalg.norm(centers, axis=1)
                values = np.linalg.norm(diff, axis=1) / (2 * k * norms)
                smooth[idx[k : length - k]] = values
    return smooth


# --------------------------------------------------------------------------
# Feature containers
# --------------------------------------------------------------------------


@dataclass
class FeatureSet:
    """A set of feature points with their sweep times and smoothness values."""

    xyz: np.ndarray
    rel_time: np.ndarray
    smoothness: np.ndarray
    indices: np.ndarray

    @staticmethod
    def empty() -> "FeatureSet":
        return FeatureSet(np.empty((0, 3)), np.empty(0), np.empty(0), np.empty(0, dtype=np.int64))

    @staticmethod
    def from_scan(scan: LidarScan, indices: np.ndarray, smooth: np.ndarray) -> "FeatureSet":
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureSet(
            xyz=scan.points[indices].astype(float),
            rel_time=scan.rel_time[indices].astype(float),
            smoothness=smooth[indices],
            indices=indices,
        )

    def subset(self, keep: np.ndarray) -> "FeatureSet":
        return FeatureSet(self.xyz[keep], self.rel_time[keep], self.smoothness[keep], self.indices[keep])

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class FrameFeatures:
    ground_features: FeatureSet
    ground_candidates: FeatureSet
    edge_features: FeatureSet
    edge_candidates: FeatureSet
    surface_features: FeatureSet
    surface_candidates: FeatureSet
    avg_ground_smoothness: float = math.inf

    def all_sets(self) -> dict[str, FeatureSet]:
        return {
            "ground_features": self.ground_features,
            "ground_candidates": self.ground_candidates,
            "edge_features": self.edge_features,
            "edge_candidates": self.edge_candidates,
            "surface_features": self.surface_features,
            "surface_candidates": self.surface_candidates,
        }


# --------------------------------------------------------------------------
# Feature extraction and fusion
# --------------------------------------------------------------------------


def _object_point_mask(n: int, detections: list[DetectedBox] | None) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if detections:
        for box in detections:
            mask[box.point_indices] = True
    return mask


def _remove_ground_from_boxes(
    detections: list[DetectedBox] | None, labels: np.ndarray, cfg: PerceptionConfig
) -> list[DetectedBox]:
    """Strip ground-labeled points from each box; drop boxes left too sparse."""
    cleaned = []
    if not detections:
        return cleaned
    for box in detections:
        keep = box.point_indices[labels[box.point_indices] == 0]
        if len(keep) < cfg.min_obj_points:
            continue
        cleaned.append(
            DetectedBox(
                center=box.center,
                size=box.size,
                yaw=box.yaw,
                confidence=box.confidence,
                point_indices=keep,
                gt_id=box.gt_id,
            )
        )
    return cleaned


def _sector_ids(points: np.ndarray, sectors: int) -> np.ndarray:
    angles = np.arctan2(points[:, 1], points[:, 0])
    ids = np.floor((angles + math.pi) / (2.0 * math.pi / sectors)).astype(int)
    return np.clip(ids, 0, sectors - 1)


def _select_per_sector(
    candidate_idx: np.ndarray,
    score: np.ndarray,
    sector: np.ndarray,
    ring: np.ndarray,
    quota: int,
    sectors: int,
    largest: bool,
) -> np.ndarray:
    """Pick up to ``quota`` points per (ring, sector) cell by score order."""
    if len(candidate_idx) == 0:
        return candidate_idx
    cell = ring.astype(np.int64) * sectors + sector
    order = np.argsort(score, kind="stable")
    if largest:
        order = order[::-1]
    chosen = []
    taken: dict[int, int] = {}
    for pos in order:
        c = int(cell[pos])
        if taken.get(c, 0) >= quota:
            continue
        taken[c] = taken.get(c, 0) + 1
        chosen.append(candidate_idx[pos])
    return np.sort(np.array(chosen, dtype=np.int64))


def extract_features(
    scan: LidarScan,
    containers: SegmentContainers,
    detections: list[DetectedBox] | None,
    labels: np.ndarray,
    cfg: PerceptionConfig,
) -> tuple[FrameFeatures, list[DetectedBox]]:
    """Select ground/edge/surface features and candidates, after mutual
    correction with the detections. Returns the features and the cleaned boxes."""
    smooth = compute_smoothness(scan, containers, cfg)
    obj_mask = _object_point_mask(len(scan), detections)
    boxes = _remove_ground_from_boxes(detections, labels, cfg)
    sector = _sector_ids(scan.points.astype(float), cfg.sectors)
    valid_smooth = ~np.isnan(smooth)

    ground_pool = np.nonzero((labels == 1) & ~obj_mask)[0]
    background_pool = np.nonzero((labels == 0) & ~obj_mask)[0]

    ground_ok = ground_pool[
        valid_smooth[ground_pool]
        & (smooth[ground_pool] < cfg.ground_smooth_threshold)
    ]
    ground_idx = _select_per_sector(
        ground_ok,
        smooth[ground_ok],
        sector[ground_ok],
        scan.ring[ground_ok],
        cfg.max_ground_per_sector,
        cfg.sectors,
        largest=False,
    )

    edge_ok = background_pool[
        valid_smooth[background_pool]
        & (smooth[background_pool] > cfg.edge_smooth_threshold)
    ]
    edge_idx = _select_per_sector(
        edge_ok,
        smooth[edge_ok],
        sector[edge_ok],
        scan.ring[edge_ok],
        cfg.max_edge_per_sector,
        cfg.sectors,
        largest=True,
    )

    surface_ok = background_pool[
        valid_smooth[background_pool]
        & (smooth[background_pool] < cfg.surface_smooth_threshold)
    ]
    surface_idx = _select_per_sector(
        surface_ok,
        smooth[surface_ok],
        sector[surface_ok],
        scan.ring[surface_ok],
        cfg.max_surface_per_sector,
        cfg.sectors,
        largest=False,
    )

    points = scan.points.astype(float)
    ground_cand = np.union1d(
        ground_pool[downsample_indices(points[ground_pool], cfg.candidate_voxel)],
        ground_idx,
    )
    edge_cand = np.union1d(
        edge_ok[downsample_indices(points[edge_ok], cfg.edge_candidate_voxel)],
        edge_idx,
    )
    surface_src = background_pool[
        ~valid_smooth[background_pool]
        | (smooth[background_pool] <= cfg.edge_smooth_threshold)
    ]
    surface_cand = np.union1d(
        surface_src[downsample_indices(points[surface_src], cfg.candidate_voxel)],
        surface_idx,
    )

    ground_fs = FeatureSet.from_scan(scan, ground_idx, smooth)
    avg = float(np.mean(ground_fs.smoothness)) if len(ground_fs) else math.inf
    features = FrameFeatures(
        ground_features=ground_fs,
        ground_candidates=FeatureSet.from_scan(scan, ground_cand, smooth),
        edge_features=FeatureSet.from_scan(scan, edge_idx, smooth),
        edge_candidates=FeatureSet.from_scan(scan, edge_cand, smooth),
        surface_features=FeatureSet.from_scan(scan, surface_idx, smooth),
        surface_candidates=FeatureSet.from_scan(scan, surface_cand, smooth),
        avg_ground_smoothness=avg,
    )
    return features, boxes


def fuse(
    features: FrameFeatures,
    detections: list[DetectedBox] | None,
    labels: np.ndarray,
    cfg: PerceptionConfig,
) -> tuple[FrameFeatures, list[DetectedBox]]:
    """Mutual correction on already-extracted features: drop object points
    from every feature set and ground points from every box."""
    n = int(
        max(
            (fs.indices.max() + 1 if len(fs) else 0)
            for fs in features.all_sets().values()
        )
    )
    n = max(n, len(labels))
    obj_mask = _object_point_mask(n, detections)

    def strip(fs: FeatureSet) -> FeatureSet:
        if len(fs) == 0:
            return fs
        return fs.subset(~obj_mask[fs.indices])

    ground_fs = strip(features.ground_features)
    avg = float(np.mean(ground_fs.smoothness)) if len(ground_fs) else math.inf
    fused = FrameFeatures(
        ground_features=ground_fs,
        ground_candidates=strip(features.ground_candidates),
        edge_features=strip(features.edge_features),
        edge_candidates=strip(features.edge_candidates),
        surface_features=strip(features.surface_features),
        surface_candidates=strip(features.surface_candidates),
        avg_ground_smoothness=avg,
    )
    return fused, _remove_ground_from_boxes(detections, labels, cfg)


def perceive(
    scan: LidarScan, detections: list[DetectedBox] | None, cfg: PerceptionConfig
) -> tuple[FrameFeatures, list[DetectedBox], np.ndarray]:
    """Full per-frame perception: ground fit, segmentation, fused features."""
    labels, _ = fit_ground(scan, cfg)
    containers = assign_times_and_segment(scan, labels, cfg)
    features, boxes = extract_features(scan, containers, detections, labels, cfg)
    return features, boxes, labels


def dump_debug_csv(path, scan: LidarScan, labels: np.ndarray, smooth: np.ndarray,
                   detections: list[DetectedBox] | None) -> None:
    """Labeled point cloud dump: x, y, z, label, smoothness, object_id."""
    obj_id = np.full(len(scan), -1, dtype=np.int64)
    if detections:
        for i, box in enumerate(detections):
            obj_id[box.point_indices] = i
    with open(path, "w") as handle:
        handle.write("x,y,z,label,smoothness,object_id\n")
        for p, lab, c, oid in zip(scan.points, labels, smooth, obj_id):
            c_str = "" if np.isnan(c) else f"{c:.6f}"
            handle.write(f"{p[0]:.4f},{p[1]:.4f},{p[2]:.4f},{int(lab)},{c_str},{oid}\n")
