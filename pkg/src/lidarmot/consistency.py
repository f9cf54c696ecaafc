"""Randomized geometric-consistency check on odometry features.

Filters out features lying on movers the detector did not catch: repeatedly
samples a minimal set of ground/edge correspondences against the previous
frame's distortion-free candidates, refines the frame increment with a
closed-form rigid fit, and keeps the feature subset with the largest inlier
support that clears the absolute and relative thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, apply_interpolated
from .perception import FeatureSet, FrameFeatures


@dataclass
class ConsistencyConfig:
    iterations: int = 30
    association_interval: int = 10
    min_inlier_ratio: float = 0.6
    min_ground_inliers: int = 20
    min_background_inliers: int = 40
    distance_check: float = 0.3
    sample_size: int = 6

    def __post_init__(self) -> None:
        if not self.iterations >= self.association_interval >= 1:
            raise ValueError("need iterations >= association_interval >= 1")
        if not 0.0 < self.min_inlier_ratio <= 1.0:
            raise ValueError("min_inlier_ratio must lie in (0, 1]")


@dataclass
class PreviousCandidates:
    """Distortion-free candidate clouds of the previous frame, with kd-trees."""

    ground: np.ndarray
    edge: np.ndarray
    surface: np.ndarray
    ground_tree: cKDTree | None = None
    edge_tree: cKDTree | None = None
    surface_tree: cKDTree | None = None

    def __post_init__(self) -> None:
        if len(self.ground) and self.ground_tree is None:
            self.ground_tree = cKDTree(self.ground)
        if len(self.edge) and self.edge_tree is None:
            self.edge_tree = cKDTree(self.edge)
        if len(self.surface) and self.surface_tree is None:
            self.surface_tree = cKDTree(self.surface)

    def is_empty(self) -> bool:
        return len(self.ground) + len(self.edge) + len(self.surface) == 0


@dataclass
class ConsistencyResult:
    ground: FeatureSet
    edge: FeatureSet
    surface: FeatureSet
    increment: Pose
    degraded: bool
    inlier_counts: tuple[int, int, int]
    accepted_iteration: int | None = None
    eta_history: list[int] = field(default_factory=list)


def _rigid_fit(source: np.ndarray, target: np.ndarray) -> Pose | None:
    """Closed-form least-squares rigid alignment (SVD), source -> target."""
    src_mean = source.mean(axis=0)
    dst_mean = target.mean(axis=0)
    cross = (target - dst_mean).T @ (source - src_mean)
    try:
        u, _, vt = np.linalg.svd(cross)
    except np.linalg.LinAlgError:
        return None
    det = np.linalg.det(u @ vt)
    rot = u @ np.diag([1.0, 1.0, np.sign(det)]) @ vt
    return Pose(rot, dst_mean - rot @ src_mean)


def _count_inliers(
    increment: Pose,
    feature_sets: list[FeatureSet],
    trees: list[cKDTree | None],
    radius: float,
) -> tuple[list[np.ndarray], list[int]]:
    masks = []
    counts = []
    for fs, tree in zip(feature_sets, trees):
        if len(fs) == 0 or tree is None:
            masks.append(np.zeros(len(fs), dtype=bool))
            counts.append(0)
            continue
        corrected = apply_interpolated(increment, fs.rel_time, fs.xyz)
        dists, _ = tree.query(corrected, k=1, workers=-1)
        mask = dists <= radius
        masks.append(mask)
        counts.append(int(mask.sum()))
    return masks, counts


def check(
    features: FrameFeatures,
    prev: PreviousCandidates | None,
    seed_increment: Pose,
    cfg: ConsistencyConfig,
    rng: np.random.Generator,
) -> ConsistencyResult:
    """Run the consistency check; on failure pass the inputs through flagged.

    Association against the previous candidates is refreshed every
    ``association_interval`` iterations using the best increment so far;
    feature positions are always distortion-corrected before matching.
    """
    feature_sets = [features.ground_features, features.edge_features, features.surface_features]
    total = sum(len(fs) for fs in feature_sets)

    def passthrough() -> ConsistencyResult:
        return ConsistencyResult(
            ground=feature_sets[0],
            edge=feature_sets[1],
            surface=feature_sets[2],
            increment=seed_increment,
            degraded=True,
            inlier_counts=(len(feature_sets[0]), len(feature_sets[1]), len(feature_sets[2])),
        )

    if prev is None or prev.is_empty() or total == 0:
        return passthrough()

    trees = [prev.ground_tree, prev.edge_tree, prev.surface_tree]
    sample_xyz = np.vstack([feature_sets[0].xyz, feature_sets[1].xyz])
    sample_rel = np.concatenate([feature_sets[0].rel_time, feature_sets[1].rel_time])
    sample_class = np.concatenate(
        [np.zeros(len(feature_sets[0]), dtype=int), np.ones(len(feature_sets[1]), dtype=int)]
    )
    if len(sample_xyz) < cfg.sample_size:
        return passthrough()

    best_increment = seed_increment
    best_eta = 0
    best_masks: list[np.ndarray] | None = None
    best_counts = (0, 0, 0)
    accepted_at: int | None = None
    eta_history: list[int] = []
    targets = np.zeros_like(sample_xyz)
    target_valid = np.zeros(len(sample_xyz), dtype=bool)

    for iteration in range(cfg.iterations):
        if iteration % cfg.association_interval == 0:
            corrected = apply_interpolated(best_increment, sample_rel, sample_xyz)
            for cls, tree in ((0, trees[0]), (1, trees[1])):
                members = sample_class == cls
                if tree is None or not members.any():
                    target_valid[members] = False
                    continue
                _, nn = tree.query(corrected[members], k=1)
                targets[members] = tree.data[nn]
                target_valid[members] = True
        usable = np.nonzero(target_valid)[0]
        if len(usable) < cfg.sample_size:
            break
        pick = rng.choice(usable, size=cfg.sample_size, replace=False)
        moved = apply_interpolated(best_increment, sample_rel[pick], sample_xyz[pick])
        correction = _rigid_fit(moved, targets[pick])
        if correction is None:
            continue
        candidate = correction.compose(best_increment)
        masks, counts = _count_inliers(candidate, feature_sets, trees, cfg.distance_check)
        eta = sum(counts)
        if (
            eta / total >= cfg.min_inlier_ratio
            and counts[0] >= cfg.min_ground_inliers
            and counts[1] + counts[2] >= cfg.min_background_inliers
            and eta > best_eta
        ):
            best_eta = eta
            best_increment = candidate
            best_masks = masks
            best_counts = (counts[0], counts[1], counts[2])
            accepted_at = iteration
            eta_history.append(eta)
            if best_eta == total:
                break  # every feature is an inlier; no later sample can beat this

    if best_masks is None:
        return passthrough()
    return ConsistencyResult(
        ground=feature_sets[0].subset(best_masks[0]),
        edge=feature_sets[1].subset(best_masks[1]),
        surface=feature_sets[2].subset(best_masks[2]),
        increment=best_increment,
        degraded=False,
        inlier_counts=best_counts,
        accepted_iteration=accepted_at,
        eta_history=eta_history,
    )
