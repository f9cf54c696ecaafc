"""Scan and detection containers plus on-disk sequence format.

A sequence directory looks like::

    manifest.json             frame count, frame period, sensor config
    scans/000000.bin          packed records: <f4 x, y, z, <f4 rel_time, <u2 ring
    labels/000000.bin         optional <i2 per-point ground-truth body id (-1 static)
    detections/000000.json    optional per-frame detected boxes
    gt/ego.tum                ground-truth sensor trajectory
    gt/object_<id>.tum        ground-truth body trajectories

Scan payloads are stored exactly as held in memory (float32/uint16), so a
write/read cycle is bit-identical.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, read_tum, write_tum

FORMAT_TAG = "lidarmot-sequence-v1"

SCAN_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("rel_time", "<f4"), ("ring", "<u2")]
)
LABEL_DTYPE = np.dtype("<i2")


class SequenceError(Exception):
    """Raised for malformed or incomplete sequence directories."""


@dataclass
class LidarScan:
    """Points from one sweep, in the instantaneous sensor frame at emission.

    ``timestamp`` is the sweep-end instant the frame is referenced to;
    ``rel_time`` is the per-point fraction of the sweep at emission.
    """

    points: np.ndarray
    rel_time: np.ndarray
    ring: np.ndarray
    timestamp: float
    frame_index: int
    gt_object_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.rel_time = np.ascontiguousarray(self.rel_time, dtype=np.float32).reshape(-1)
        self.ring = np.ascontiguousarray(self.ring, dtype=np.uint16).reshape(-1)
        n = len(self.points)
        if len(self.rel_time) != n or len(self.ring) != n:
            raise ValueError("points, rel_time, and ring must have equal length")
        if self.gt_object_ids is not None:
            self.gt_object_ids = np.ascontiguousarray(self.gt_object_ids, dtype=np.int16)
            if len(self.gt_object_ids) != n:
                raise ValueError("gt_object_ids length mismatch")

    def __len__(self) -> int:
        return len(self.points)

    def ring_indices(self) -> list[np.ndarray]:
        """Per-ring point indices ordered by emission time."""
        out = []
        n_rings = int(self.ring.max()) + 1 if len(self.ring) else 0
        for r in range(n_rings):
            idx = np.nonzero(self.ring == r)[0]
            if len(idx):
                idx = idx[np.argsort(self.rel_time[idx], kind="stable")]
            out.append(idx)
        return out


@dataclass
class DetectedBox:
    """Oriented box detection: center/size/yaw in the sensor frame, plus the
    scan indices of the points it encloses."""

    center: np.ndarray
    size: np.ndarray
    yaw: float
    confidence: float
    point_indices: np.ndarray
    gt_id: int | None = None

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64).reshape(-1)
        if np.any(self.size <= 0.0):
            raise ValueError(f"box size must be positive, got {self.size}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def pose(self) -> Pose:
        cos_y, sin_y = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[cos_y, -sin_y, 0.0], [sin_y, cos_y, 0.0], [0.0, 0.0, 1.0]])
        return Pose(rot, self.center)

    def contains(self, points: np.ndarray, inflate: float = 1.0) -> np.ndarray:
        """Boolean mask of points inside the (optionally inflated) box."""
        local = self.pose().inverse().apply(np.asarray(points, dtype=float))
        half = 0.5 * self.size * inflate
        return np.all(np.abs(local) <= half, axis=1)

    def to_json(self) -> dict:
        payload = {
            "center": [float(v) for v in self.center],
            "size": [float(v) for v in self.size],
            "yaw": float(self.yaw),
            "confidence": float(self.confidence),
            "point_indices": [int(v) for v in self.point_indices],
        }
        if self.gt_id is not None:
            payload["gt_id"] = int(self.gt_id)
        return payload

    @staticmethod
    def from_json(payload: dict) -> "DetectedBox":
        return DetectedBox(
            center=np.array(payload["center"], dtype=float),
            size=np.array(payload["size"], dtype=float),
            yaw=float(payload["yaw"]),
            confidence=float(payload["confidence"]),
            point_indices=np.array(payload["point_indices"], dtype=np.int64),
            gt_id=payload.get("gt_id"),
        )


@dataclass
class Sequence:
    """An in-memory dataset: scans, optional detections, and ground truth.

    Ground-truth trajectories are kept as raw (N, 8) TUM rows so that file
    round trips are bit-exact; ``ego_pose(i)`` converts on demand.
    """

    scans: list[LidarScan]
    frame_period: float
    detections: list[list[DetectedBox]] | None = None
    ego_truth: np.ndarray | None = None
    object_truth: dict[int, np.ndarray] = field(default_factory=dict)
    scanner_info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scans)

    def ego_pose(self, frame: int) -> Pose:
        if self.ego_truth is None:
            raise SequenceError("sequence has no ego ground truth")
        row = self.ego_truth[frame]
        return Pose.from_quaternion(row[4:8], row[1:4])

    def object_pose(self, object_id: int, frame: int) -> Pose:
        rows = self.object_truth[object_id]
        row = rows[frame]
        return Pose.from_quaternion(row[4:8], row[1:4])


def _scan_to_records(scan: LidarScan) -> np.ndarray:
    records = np.empty(len(scan), dtype=SCAN_DTYPE)
    records["x"] = scan.points[:, 0]
    records["y"] = scan.points[:, 1]
    records["z"] = scan.points[:, 2]
    records["rel_time"] = scan.rel_time
    records["ring"] = scan.ring
    return records


def write_sequence(directory: str | os.PathLike, sequence: Sequence) -> None:
    """Write a sequence to disk; the layout is documented in the module docstring."""
    directory = os.fspath(directory)
    os.makedirs(os.path.join(directory, "scans"), exist_ok=True)
    has_labels = all(s.gt_object_ids is not None for s in sequence.scans)
    if has_labels:
        os.makedirs(os.path.join(directory, "labels"), exist_ok=True)
    if sequence.detections is not None:
        os.makedirs(os.path.join(directory, "detections"), exist_ok=True)
    os.makedirs(os.path.join(directory, "gt"), exist_ok=True)

    for i, scan in enumerate(sequence.scans):
        _scan_to_records(scan).tofile(os.path.join(directory, "scans", f"{i:06d}.bin"))
        if has_labels:
            scan.gt_object_ids.astype(LABEL_DTYPE).tofile(
                os.path.join(directory, "labels", f"{i:06d}.bin")
            )
    if sequence.detections is not None:
        for i, boxes in enumerate(sequence.detections):
            with open(
                os.path.join(directory, "detections", f"{i:06d}.json"), "w"
            ) as handle:
                json.dump([b.to_json() for b in boxes], handle)

    object_ids = sorted(sequence.object_truth)
    if sequence.ego_truth is not None:
        write_tum(os.path.join(directory, "gt", "ego.tum"), sequence.ego_truth, fmt="%.17g")
    for obj_id in object_ids:
        write_tum(
            os.path.join(directory, "gt", f"object_{obj_id}.tum"),
            sequence.object_truth[obj_id],
            fmt="%.17g",
        )

    manifest = {
        "format": FORMAT_TAG,
        "frame_count": len(sequence.scans),
        "frame_period": sequence.frame_period,
        "timestamps": [s.timestamp for s in sequence.scans],
        "has_detections": sequence.detections is not None,
        "has_labels": has_labels,
        "has_ego_truth": sequence.ego_truth is not None,
        "object_ids": object_ids,
        "sensor": sequence.scanner_info,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as handle:
        json.dump(manifest, handle, indent=2)


def _read_scan_file(path: str, timestamp: float, frame_index: int) -> LidarScan:
    size = os.path.getsize(path)
    if size % SCAN_DTYPE.itemsize != 0:
        raise SequenceError(
            f"{path}: truncated scan file, {size} bytes is not a multiple of "
            f"{SCAN_DTYPE.itemsize} (first bad byte at offset "
            f"{size - size % SCAN_DTYPE.itemsize})"
        )
    records = np.fromfile(path, dtype=SCAN_DTYPE)
    points = np.stack([records["x"], records["y"], records["z"]], axis=1)
    return LidarScan(
        points=points,
        rel_time=records["rel_time"],
        ring=records["ring"],
        timestamp=timestamp,
        frame_index=frame_index,
    )


def read_sequence(directory: str | os.PathLike) -> Sequence:
    """Read a sequence directory; raises SequenceError on missing or bad files."""
    directory = os.fspath(directory)
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise SequenceError(f"missing manifest: {manifest_path}")
    try:
        with open(manifest_path) as handle:
            manifest = json.load(handle)
    except json.JSONDecodeError as exc:
        raise SequenceError(f"{manifest_path}: invalid JSON at char {exc.pos}") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise SequenceError(f"unsupported sequence format: {manifest.get('format')!r}")

    frame_count = int(manifest["frame_count"])
    timestamps = manifest["timestamps"]
    scans = []
    for i in range(frame_count):
        scan_path = os.path.join(directory, "scans", f"{i:06d}.bin")
        if not os.path.isfile(scan_path):
            raise SequenceError(f"manifest references missing frame file: {scan_path}")
        scans.append(_read_scan_file(scan_path, float(timestamps[i]), i))
        if manifest.get("has_labels"):
            label_path = os.path.join(directory, "labels", f"{i:06d}.bin")
            if not os.path.isfile(label_path):
                raise SequenceError(f"manifest references missing label file: {label_path}")
            labels = np.fromfile(label_path, dtype=LABEL_DTYPE)
            if len(labels) != len(scans[-1]):
                raise SequenceError(
                    f"{label_path}: {len(labels)} labels for {len(scans[-1])} points"
                )
            scans[-1].gt_object_ids = labels

    detections = None
    if manifest.get("has_detections"):
        detections = []
        for i in range(frame_count):
            det_path = os.path.join(directory, "detections", f"{i:06d}.json")
            if not os.path.isfile(det_path):
                raise SequenceError(f"manifest references missing detection file: {det_path}")
            with open(det_path) as handle:
                try:
                    payload = json.load(handle)
                except json.JSONDecodeError as exc:
                    raise SequenceError(f"{det_path}: invalid JSON at char {exc.pos}") from exc
            detections.append([DetectedBox.from_json(item) for item in payload])

    ego_truth = None
    if manifest.get("has_ego_truth"):
        ego_path = os.path.join(directory, "gt", "ego.tum")
        if not os.path.isfile(ego_path):
            raise SequenceError(f"manifest references missing file: {ego_path}")
        try:
            ego_truth = read_tum(ego_path)
        except ValueError as exc:
            raise SequenceError(str(exc)) from exc

    object_truth = {}
    for obj_id in manifest.get("object_ids", []):
        obj_path = os.path.join(directory, "gt", f"object_{obj_id}.tum")
        if not os.path.isfile(obj_path):
            raise SequenceError(f"manifest references missing file: {obj_path}")
        try:
            object_truth[int(obj_id)] = read_tum(obj_path)
        except ValueError as exc:
            raise SequenceError(str(exc)) from exc

    return Sequence(
        scans=scans,
        frame_period=float(manifest["frame_period"]),
        detections=detections,
        ego_truth=ego_truth,
        object_truth=object_truth,
        scanner_info=manifest.get("sensor", {}),
    )
