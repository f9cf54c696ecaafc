"""Two-step frame-to-frame ego motion estimation.

Step one matches checked ground features to the previous frame's ground
candidates and solves only [t_z, roll, pitch] by point-to-plane LM. Step two
freezes those and solves [t_x, t_y, yaw] from edge (point-to-line) and
surface (point-to-plane) correspondences. Features are re-corrected for
motion distortion with the current increment on every iteration, and
correspondences are rebuilt from the corrected positions.

Matches are weighted by the inverse of each fit's deviation: the worst-fit
spread of a neighbor set estimates the local measurement noise, so clean
planes dominate while cross-surface or quantization-limited fits fade out
instead of biasing the solve. Jacobians are analytic, with the per-point
distortion interpolation linearized as a plain scaling of the parameter
effect (exact for sweep-end points, first-order elsewhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .consistency import PreviousCandidates
from .geometry import Pose, apply_interpolated, euler_rotation_derivatives
from .perception import FeatureSet

_GROUND_PARAMS = (2, 3, 4)  # t_z, roll, pitch
_PLANAR_PARAMS = (0, 1, 5)  # t_x, t_y, yaw


@dataclass
class EgoConfig:
    lm_init_lambda: float = 1e-4
    lm_max_iterations: int = 10
    lm_tolerance: float = 1e-6
    correspondence_gate: float = 1.0
    min_ground_matches: int = 20
    min_planar_matches: int = 10
    condition_limit: float = 1e8
    edge_noise_floor: float = 0.1


@dataclass
class EgoIncrement:
    pose: Pose
    components: np.ndarray
    inlier_counts: dict[str, int]
    converged: bool
    degraded: bool


def _pose_from(params: np.ndarray) -> Pose:
    return Pose.from_components(*params)


class _PlaneCorrespondences:
    """Point-to-plane matches against least-squares planes through the 5
    nearest candidates, weighted by coplanarity quality."""

    K = 5
    TOL_FLOOR = 0.05
    SCALE_FLOOR = 0.01

    def __init__(
        self,
        features: FeatureSet,
        tree: cKDTree | None,
        params: np.ndarray,
        gate: float,
    ):
        self.xyz = np.empty((0, 3))
        self.rel = np.empty(0)
        self.normals = np.empty((0, 3))
        self.anchors = np.empty((0, 3))
        self.scales = np.empty(0)
        if tree is None or len(features) == 0 or len(tree.data) < self.K:
            return
        corrected = apply_interpolated(_pose_from(params), features.rel_time, features.xyz)
        dists, idx = tree.query(corrected, k=self.K, workers=-1)
        neighbors = np.asarray(tree.data)[idx]
        means = neighbors.mean(axis=1)
        centered = neighbors - means[:, None, :]
        cov = np.einsum("nki,nkj->nij", centered, centered) / self.K
        eigvals, eigvecs = np.linalg.eigh(cov)
        normals = eigvecs[:, :, 0]
        flatness = np.abs(np.einsum("nki,ni->nk", centered, normals)).max(axis=1)
        tol = max(3.0 * float(np.median(flatness)), self.TOL_FLOOR)
        # Reject sets without a well-defined smallest direction (1D strings);
        # floor arcs keep an exact-zero out-of-plane direction and survive.
        oriented = eigvals[:, 1] > 9.0 * np.maximum(eigvals[:, 0], 1e-12)
        ok = (dists[:, 0] <= gate) & (flatness <= tol) & oriented
        self.normals = normals[ok]
        self.anchors = means[ok]
        self.xyz = features.xyz[ok]
        self.rel = features.rel_time[ok]
        self.scales = 1.0 / np.maximum(flatness[ok], self.SCALE_FLOOR)

    def __len__(self) -> int:
        return len(self.xyz)

    def residuals(self, params: np.ndarray) -> np.ndarray:
        corrected = apply_interpolated(_pose_from(params), self.rel, self.xyz)
        return self.scales * np.sum(self.normals * (corrected - self.anchors), axis=1)

    def linearize(self, params: np.ndarray, free: tuple[int, ...]):
        residuals = self.residuals(params)
        _, rot_derivs = euler_rotation_derivatives(params[3], params[4], params[5])
        jac = np.empty((len(self.xyz), len(free)))
        weight = self.scales * self.rel
        for col, p in enumerate(free):
            if p < 3:
                jac[:, col] = weight * self.normals[:, p]
            else:
                moved = self.xyz @ rot_derivs[p - 3].T
                jac[:, col] = weight * np.sum(self.normals * moved, axis=1)
        return residuals, jac


class _LineCorrespondences:
    """Point-to-line matches against principal lines through the 5 nearest
    edge candidates.

    The weight's noise estimate is floored by the scanner's apparent-edge
    placement error: an edge sampled at discrete azimuths shifts tangentially
    between frames no matter how straight the fit looks.
    """

    K = 5
    TOL_FLOOR = 0.1
    ANISOTROPY = 3.0

    def __init__(
        self,
        features: FeatureSet,
        tree: cKDTree | None,
        params: np.ndarray,
        gate: float,
        noise_floor: float = 0.1,
    ):
        self.xyz = np.empty((0, 3))
        self.rel = np.empty(0)
        self.directions = np.empty((0, 3))
        self.anchors = np.empty((0, 3))
        self.scales = np.empty(0)
        if tree is None or len(features) == 0 or len(tree.data) < self.K:
            return
        corrected = apply_interpolated(_pose_from(params), features.rel_time, features.xyz)
        dists, idx = tree.query(corrected, k=self.K, workers=-1)
        neighbors = np.asarray(tree.data)[idx]
        means = neighbors.mean(axis=1)
        centered = neighbors - means[:, None, :]
        cov = np.einsum("nki,nkj->nij", centered, centered) / self.K
        eigvals, eigvecs = np.linalg.eigh(cov)
        directions = eigvecs[:, :, 2]
        off_axis = np.sqrt(np.maximum(eigvals[:, 1], 0.0))
        tol = max(3.0 * float(np.median(off_axis)), self.TOL_FLOOR)
        ok = (
            (dists[:, 0] <= gate)
            & (off_axis <= tol)
            & (eigvals[:, 2] > self.ANISOTROPY * np.maximum(eigvals[:, 1], 1e-12))
        )
        self.directions = directions[ok]
        self.anchors = means[ok]
        self.xyz = features.xyz[ok]
        self.rel = features.rel_time[ok]
        self.scales = 1.0 / np.maximum(off_axis[ok], noise_floor)

    def __len__(self) -> int:
        return len(self.xyz)

    def residuals(self, params: np.ndarray) -> np.ndarray:
        corrected = apply_interpolated(_pose_from(params), self.rel, self.xyz)
        offset = corrected - self.anchors
        return self.scales * np.linalg.norm(np.cross(offset, self.directions), axis=1)

    def linearize(self, params: np.ndarray, free: tuple[int, ...]):
        corrected = apply_interpolated(_pose_from(params), self.rel, self.xyz)
        offset = corrected - self.anchors
        cross = np.cross(offset, self.directions)
        norms = np.maximum(np.linalg.norm(cross, axis=1), 1e-12)
        residuals = self.scales * norms
        unit = cross / norms[:, None]
        _, rot_derivs = euler_rotation_derivatives(params[3], params[4], params[5])
        jac = np.empty((len(self.xyz), len(free)))
        weight = self.scales * self.rel
        for col, p in enumerate(free):
            if p < 3:
                moved = np.zeros_like(self.xyz)
                moved[:, p] = 1.0
            else:
                moved = self.xyz @ rot_derivs[p - 3].T
            jac[:, col] = weight * np.sum(unit * np.cross(moved, self.directions), axis=1)
        return residuals, jac


def _linearize_all(correspondences, params: np.ndarray, free: tuple[int, ...]):
    res_parts = []
    jac_parts = []
    for corr in correspondences:
        if len(corr) == 0:
            continue
        residuals, jac = corr.linearize(params, free)
        res_parts.append(residuals)
        jac_parts.append(jac)
    if not res_parts:
        return np.empty(0), np.empty((0, len(free)))
    return np.concatenate(res_parts), np.vstack(jac_parts)


def _stacked_residuals(correspondences, params: np.ndarray) -> np.ndarray:
    parts = [c.residuals(params) for c in correspondences if len(c)]
    if not parts:
        return np.empty(0)
    return np.concatenate(parts)


def _lm_refine(
    params: np.ndarray,
    free: tuple[int, ...],
    build_correspondences,
    cfg: EgoConfig,
    min_matches: int,
) -> tuple[np.ndarray, bool, bool, int]:
    """Levenberg-Marquardt over the selected parameter indices.

    Returns (params, converged, degraded, match_count). Correspondences are
    rebuilt each outer iteration; a trial step is only accepted when it lowers
    the residual norm.
    """
    params = params.copy()
    lam = cfg.lm_init_lambda
    converged = False
    matches = 0
    for _ in range(cfg.lm_max_iterations):
        correspondences = build_correspondences(params)
        matches = sum(len(c) for c in correspondences)
        if matches < min_matches:
            return params, False, True, matches
        residuals, jac = _linearize_all(correspondences, params, free)
        cost = float(residuals @ residuals)
        jtj = jac.T @ jac
        eigvals = np.linalg.eigvalsh(jtj)
        if eigvals[-1] <= 0.0 or eigvals[-1] / max(eigvals[0], 1e-300) > cfg.condition_limit:
            return params, False, True, matches
        gradient = jac.T @ residuals
        try:
            delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)), -gradient)
        except np.linalg.LinAlgError:
            return params, False, True, matches
        trial = params.copy()
        trial[list(free)] += delta
        trial_residuals = _stacked_residuals(correspondences, trial)
        if float(trial_residuals @ trial_residuals) < cost:
            params = trial
            lam = max(lam / 10.0, 1e-12)
        else:
            lam *= 10.0
        if np.linalg.norm(delta) < cfg.lm_tolerance:
            converged = True
            break
    return params, converged, False, matches


def estimate_ground_step(
    ground: FeatureSet,
    prev: PreviousCandidates,
    seed: np.ndarray,
    cfg: EgoConfig,
) -> tuple[np.ndarray, bool, bool, int]:
    """Solve [t_z, roll, pitch] against previous ground candidates.

    On insufficient matches the seed components are held and the increment is
    flagged degraded.
    """

    def build(params: np.ndarray):
        return [_PlaneCorrespondences(ground, prev.ground_tree, params, cfg.correspondence_gate)]

    return _lm_refine(np.asarray(seed, dtype=float), _GROUND_PARAMS, build, cfg, cfg.min_ground_matches)


def estimate_planar_step(
    edge: FeatureSet,
    surface: FeatureSet,
    prev: PreviousCandidates,
    params_after_ground: np.ndarray,
    cfg: EgoConfig,
) -> tuple[np.ndarray, bool, bool, int]:
    """Solve [t_x, t_y, yaw] with the ground-step components held fixed."""

    def build(params: np.ndarray):
        return [
            _LineCorrespondences(
                edge, prev.edge_tree, params, cfg.correspondence_gate, cfg.edge_noise_floor
            ),
            _PlaneCorrespondences(surface, prev.surface_tree, params, cfg.correspondence_gate),
        ]

    return _lm_refine(
        np.asarray(params_after_ground, dtype=float),
        _PLANAR_PARAMS,
        build,
        cfg,
        cfg.min_planar_matches,
    )


def estimate(
    ground: FeatureSet,
    edge: FeatureSet,
    surface: FeatureSet,
    avg_ground_smoothness: float,
    prev: PreviousCandidates,
    seed: Pose,
    cfg: EgoConfig,
    degraded_input: bool = False,
) -> EgoIncrement:
    """Full two-step increment estimate from consistency-checked features.

    Surface features flatter than the frame's average ground smoothness are
    the only ones admitted to the planar step.
    """
    seed_params = seed.to_components()
    flat = surface.subset(surface.smoothness < avg_ground_smoothness)

    params, converged1, degraded1, n_ground = estimate_ground_step(ground, prev, seed_params, cfg)
    if degraded1:
        params = params.copy()
        params[[2, 3, 4]] = seed_params[[2, 3, 4]]
    params2, converged2, degraded2, n_planar = estimate_planar_step(edge, flat, prev, params, cfg)
    if degraded2:
        # Keep the in-plane seed components; the ground step result stands.
        params2 = params.copy()
        params2[[0, 1, 5]] = seed_params[[0, 1, 5]]
    return EgoIncrement(
        pose=_pose_from(params2),
        components=params2,
        inlier_counts={"ground": n_ground, "planar": n_planar},
        converged=converged1 and converged2,
        degraded=degraded_input or degraded1 or degraded2,
    )


def accumulate(prev_pose: Pose, increment: EgoIncrement | Pose) -> Pose:
    """Fold a frame increment onto the previous absolute pose."""
    inc = increment.pose if isinstance(increment, EgoIncrement) else increment
    return prev_pose.compose(inc)
