"""Shared voxel-grid helpers: hashing, downsampling, and per-voxel statistics."""

from __future__ import annotations

import numpy as np

_OFFSET = 1 << 20
_SHIFT = 21
_NEIGHBOR_OFFSETS = np.array(
    [
        (dx << (2 * _SHIFT)) | (dy << _SHIFT) | dz
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
    ],
    dtype=np.int64,
)


def voxel_codes(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Pack integer voxel coordinates of each point into a single int64 key."""
    coords = np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)
    coords = np.clip(coords, -_OFFSET, _OFFSET - 1) + _OFFSET
    return (coords[:, 0] << (2 * _SHIFT)) | (coords[:, 1] << _SHIFT) | coords[:, 2]


def downsample_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Indices of the first point falling into each occupied voxel.

    Deterministic for a fixed input order, which keeps feature extraction and
    map insertion reproducible.
    """
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    codes = voxel_codes(points, voxel_size)
    order = np.argsort(codes, kind="stable")
    sorted_codes = codes[order]
    first = np.ones(len(codes), dtype=bool)
    first[1:] = sorted_codes[1:] != sorted_codes[:-1]
    return np.sort(order[first])


class VoxelStats:
    """Per-voxel Gaussian statistics (mean, covariance, count) over a point set.

    Arrays are kept sorted by voxel code so batched lookups reduce to a
    searchsorted. Covariances are population covariances of the points seen by
    the voxel; regularization happens at query time.
    """

    def __init__(
        self,
        codes: np.ndarray,
        means: np.ndarray,
        second_moments: np.ndarray,
        counts: np.ndarray,
        voxel_size: float,
    ):
        self.codes = codes
        self.means = means
        self.second_moments = second_moments  # sum of outer products / count
        self.counts = counts
        self.voxel_size = voxel_size

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def covariances(self) -> np.ndarray:
        mu_outer = self.means[:, :, None] * self.means[:, None, :]
        return self.second_moments - mu_outer

    @staticmethod
    def from_points(points: np.ndarray, voxel_size: float) -> "VoxelStats":
        points = np.asarray(points, dtype=float)
        if len(points) == 0:
            return VoxelStats(
                np.empty(0, dtype=np.int64),
                np.empty((0, 3)),
                np.empty((0, 3, 3)),
                np.empty(0),
                voxel_size,
            )
        codes = voxel_codes(points, voxel_size)
        order = np.argsort(codes, kind="stable")
        sorted_codes = codes[order]
        unique_codes, starts = np.unique(sorted_codes, return_index=True)
        sorted_pts = points[order]
        sums = np.add.reduceat(sorted_pts, starts, axis=0)
        outers = sorted_pts[:, :, None] * sorted_pts[:, None, :]
        outer_sums = np.add.reduceat(outers.reshape(len(points), 9), starts, axis=0)
        counts = np.diff(np.append(starts, len(points))).astype(float)
        means = sums / counts[:, None]
        second = outer_sums.reshape(-1, 3, 3) / counts[:, None, None]
        return VoxelStats(unique_codes, means, second, counts, voxel_size)

    def transformed(
        self, rotation: np.ndarray, translation: np.ndarray, rebin: bool = True
    ) -> "VoxelStats":
        """Rigidly move the statistics and re-bin them on the new grid."""
        new_means = self.means @ rotation.T + translation
        centered = self.second_moments - self.means[:, :, None] * self.means[:, None, :]
        new_cov = rotation @ centered @ rotation.T
        new_second = new_cov + new_means[:, :, None] * new_means[:, None, :]
        moved = VoxelStats(
            voxel_codes(new_means, self.voxel_size),
            new_means,
            new_second,
            self.counts,
            self.voxel_size,
        )
        return moved._rebinned() if rebin else moved

    def merged_with_points(self, points: np.ndarray) -> "VoxelStats":
        other = VoxelStats.from_points(points, self.voxel_size)
        combined = VoxelStats(
            np.concatenate([self.codes, other.codes]),
            np.concatenate([self.means, other.means]),
            np.concatenate([self.second_moments, other.second_moments]),
            np.concatenate([self.counts, other.counts]),
            self.voxel_size,
        )
        return combined._rebinned()

    def moved_and_merged(
        self, rotation: np.ndarray, translation: np.ndarray, points: np.ndarray
    ) -> "VoxelStats":
        """Transform the map and fold in new points with a single re-bin."""
        moved = self.transformed(rotation, translation, rebin=False)
        return moved.merged_with_points(points)

    def _rebinned(self) -> "VoxelStats":
        if len(self.codes) == 0:
            return self
        order = np.argsort(self.codes, kind="stable")
        codes = self.codes[order]
        unique_codes, starts = np.unique(codes, return_index=True)
        counts = self.counts[order]
        weighted_means = self.means[order] * counts[:, None]
        weighted_second = self.second_moments[order] * counts[:, None, None]
        group_counts = np.add.reduceat(counts, starts)
        group_means = np.add.reduceat(weighted_means, starts, axis=0) / group_counts[:, None]
        group_second = (
            np.add.reduceat(weighted_second.reshape(len(counts), 9), starts, axis=0)
            .reshape(-1, 3, 3)
            / group_counts[:, None, None]
        )
        return VoxelStats(unique_codes, group_means, group_second, group_counts, self.voxel_size)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Voxel index for each point, or -1 where the voxel is empty."""
        if len(self.codes) == 0 or len(points) == 0:
            return np.full(len(points), -1, dtype=np.int64)
        queries = voxel_codes(points, self.voxel_size)
        pos = np.searchsorted(self.codes, queries)
        pos = np.clip(pos, 0, len(self.codes) - 1)
        found = self.codes[pos] == queries
        return np.where(found, pos, -1)

    def lookup_nearest(self, points: np.ndarray, radius_voxels: float = 1.5) -> np.ndarray:
        """Index of the nearest-mean voxel within the 27-cell neighborhood.

        Smoother than the plain cell lookup: a query sliding across a cell
        boundary keeps a valid match, which removes the voxel-pitch aliasing
        of cell-only association.
        """
        n = len(points)
        if len(self.codes) == 0 or n == 0:
            return np.full(n, -1, dtype=np.int64)
        points = np.asarray(points, dtype=float)
        queries = voxel_codes(points, self.voxel_size)
        all_codes = queries[None, :] + _NEIGHBOR_OFFSETS[:, None]
        pos = np.searchsorted(self.codes, all_codes.ravel()).reshape(27, n)
        np.clip(pos, 0, len(self.codes) - 1, out=pos)
        found = self.codes[pos] == all_codes
        deltas = self.means[pos] - points[None, :, :]
        dist = np.einsum("kni,kni->kn", deltas, deltas)
        limit = (radius_voxels * self.voxel_size) ** 2
        dist = np.where(found & (dist <= limit), dist, np.inf)
        pick = np.argmin(dist, axis=0)
        rows = np.arange(n)
        return np.where(np.isfinite(dist[pick, rows]), pos[pick, rows], -1)

    def regularized_covariances(self, floor: float) -> np.ndarray:
        """Covariances with eigenvalues clamped from below at ``floor``."""
        cov = self.covariances
        sym = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        eigvals, eigvecs = np.linalg.eigh(sym)
        eigvals = np.maximum(eigvals, floor)
        return np.einsum("nij,nj,nkj->nik", eigvecs, eigvals, eigvecs)

    def floored_covariances(self, floor: float) -> np.ndarray:
        """Covariances plus floor * I: every eigenvalue is raised by the
        floor, which bounds them below like the exact clamp but without an
        eigendecomposition. Used in hot paths where the result feeds an
        already-regularized combination."""
        return 0.5 * (self.covariances + np.transpose(self.covariances, (0, 2, 1))) + (
            floor * np.eye(3)
        )
