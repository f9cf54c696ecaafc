"""Per-frame pipeline: perception -> consistency -> ego odometry and
multi-object tracking -> object odometry -> mapping, with timing and logging.

Given the same sequence, configuration, and seed, every output file is
byte-identical between runs: the only randomness is the consistency check's
sampling, driven by one seeded generator.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import ego_odometry, tracking
from .config import RunConfig, config_to_flat_dict
from .consistency import PreviousCandidates, check
from .dataset import SCAN_DTYPE, DetectedBox, LidarScan, Sequence, read_sequence
from .geometry import Pose, apply_interpolated, pose_to_tum_row, write_tum
from .mapping import (
    FrameCandidates,
    SemanticMap4D,
    StaticMap,
    compute_correction,
    map_refine,
)
from .object_odometry import ObjectPoseChain, advance_chain, initialize_chain
from .perception import FrameFeatures, perceive

MODULE_NAMES = (
    "perception",
    "consistency",
    "ego_odometry",
    "tracking",
    "object_odometry",
    "mapping",
)


class PipelineError(Exception):
    """Hard numerical or data failure inside a pipeline stage."""


@dataclass
class RunReport:
    frames: int = 0
    failure_frame: int | None = None
    failure_reason: str | None = None
    ego_odom: list[tuple[float, Pose]] = field(default_factory=list)
    ego_map: list[tuple[float, Pose]] = field(default_factory=list)
    chains: dict[int, ObjectPoseChain] = field(default_factory=dict)
    track_gt_ids: dict[int, int] = field(default_factory=dict)
    match_log: list[tuple[int, int, int | None]] = field(default_factory=list)
    cost_matrices: list[np.ndarray] = field(default_factory=list)
    consistency_log: list[dict] = field(default_factory=list)
    timings: dict[str, list[float]] = field(default_factory=dict)
    static_map: StaticMap | None = None
    semantic_map: SemanticMap4D | None = None
    tracking_rows: list[dict] = field(default_factory=list)
    output_dir: str | None = None

    def map_contamination(self) -> int:
        return self.static_map.contamination() if self.static_map is not None else 0


class _Timer:
    def __init__(self, report: RunReport, name: str):
        self.samples = report.timings.setdefault(name, [])

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.samples.append(time.perf_counter() - self.start)
        return False


def _dedistorted_candidates(
    features: FrameFeatures, increment: Pose, scan: LidarScan
) -> tuple[PreviousCandidates, FrameCandidates]:
    """Candidate clouds corrected to the frame's reference instant.

    The same arrays serve as next frame's matching targets and as this
    frame's mapping input; ground-truth labels ride along when available.
    """

    def correct(fs):
        if len(fs) == 0:
            return np.empty((0, 3))
        return apply_interpolated(increment, fs.rel_time - 1.0, fs.xyz)

    ground = correct(features.ground_candidates)
    edge = correct(features.edge_candidates)
    surface = correct(features.surface_candidates)

    def labels(fs):
        if scan.gt_object_ids is None or len(fs) == 0:
            return None
        return scan.gt_object_ids[fs.indices]

    previous = PreviousCandidates(ground=ground, edge=edge, surface=surface)
    frame_cands = FrameCandidates(
        ground=ground,
        edge=edge,
        surface=surface,
        ground_labels=labels(features.ground_candidates),
        edge_labels=labels(features.edge_candidates),
        surface_labels=labels(features.surface_candidates),
    )
    return previous, frame_cands


def _predicted_box(track: tracking.TrackedObject) -> DetectedBox:
    """Advance a track's box by its constant relative increment."""
    pose = track.increment.inverse().compose(track.last_box.pose())
    yaw = math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])
    return DetectedBox(
        center=pose.translation,
        size=track.last_box.size,
        yaw=yaw,
        confidence=track.last_box.confidence,
        point_indices=track.last_box.point_indices,
        gt_id=track.last_box.gt_id,
    )


class _TrackerState:
    """Owns the track list and their odom-frame pose chains."""

    def __init__(self, config: RunConfig, report: RunReport):
        self.cfg = config.tracking
        self.report = report
        self.tracks: list[tracking.TrackedObject] = []
        self.next_id = 0

    def active(self) -> list[tracking.TrackedObject]:
        return [t for t in self.tracks if t.is_active()]

    def step(
        self,
        frame: int,
        scan: LidarScan,
        detections: list[DetectedBox],
        ego_increment: Pose,
        ego_pose: Pose,
    ) -> list[tuple[tracking.TrackedObject, Pose, Pose, Pose | None]]:
        """Associate, estimate increments, and update track state.

        Returns per-track chain advance instructions:
        (track, relative_increment, previous_object_to_lidar, observed pose).
        """
        active = self.active()
        matches, unmatched_tracks, unmatched_dets = tracking.associate(
            active, detections, self.cfg
        )
        if active and detections:
            self.report.cost_matrices.append(
                tracking.build_cost_matrix(active, detections, self.cfg)
            )
        advances: list[tuple[tracking.TrackedObject, Pose, Pose, Pose | None]] = []
        matched_ids: set[int] = set()

        for track_idx, det_idx in matches:
            track = active[track_idx]
            detection = tracking.normalize_box_yaw(detections[det_idx], track.last_box.yaw)
            points = scan.points[detection.point_indices].astype(float)
            rel_times = scan.rel_time[detection.point_indices].astype(float)
            prev_object_to_lidar = track.object_to_lidar
            estimate = tracking.estimate_increment(track, detection, points, rel_times, self.cfg)
            if math.isinf(estimate.fit_quality):
                # Estimation failed: continue on the constant-motion model and
                # let the lifecycle book a miss.
                self._coast(track)
                advances.append((track, track.increment, prev_object_to_lidar, None))
                self.report.match_log.append((frame, track.track_id, None))
                continue
            tracking.apply_update(track, detection, estimate, points, rel_times, frame, self.cfg)
            matched_ids.add(track.track_id)
            advances.append((track, estimate.pose, prev_object_to_lidar, detection.pose()))
            self.report.match_log.append((frame, track.track_id, detection.gt_id))
            self.report.tracking_rows.append(
                {
                    "frame": frame,
                    "track_id": track.track_id,
                    "state": track.state,
                    "x": detection.center[0],
                    "y": detection.center[1],
                    "z": detection.center[2],
                    "yaw": detection.yaw,
                    "fit_quality": estimate.fit_quality,
                    "n_points": len(detection.point_indices),
                }
            )

        for track_idx in unmatched_tracks:
            track = active[track_idx]
            prev_object_to_lidar = track.object_to_lidar
            self._coast(track)
            advances.append((track, track.increment, prev_object_to_lidar, None))

        self.tracks = tracking.update_track_lifecycle(self.tracks, matched_ids, self.cfg)

        for det_idx in unmatched_dets:
            detection = detections[det_idx]
            if len(detection.point_indices) == 0:
                continue
            points = scan.points[detection.point_indices].astype(float)
            track = tracking.start_track(self.next_id, detection, points, frame, self.cfg)
            self.next_id += 1
            self.tracks.append(track)
            self.report.chains[track.track_id] = initialize_chain(
                track.track_id, frame, ego_pose, detection.pose()
            )
            if detection.gt_id is not None:
                self.report.track_gt_ids[track.track_id] = detection.gt_id
            self.report.match_log.append((frame, track.track_id, detection.gt_id))
        return advances

    def _coast(self, track: tracking.TrackedObject) -> None:
        """Propagate the box state by the constant relative motion model.

        The voxel map rides along into the predicted frame so a later match
        still finds overlapping geometry.
        """
        prev = track.object_to_lidar
        track.last_box = _predicted_box(track)
        track.object_to_lidar = track.increment.inverse().compose(prev)
        if track.voxel_map is not None and len(track.voxel_map):
            inverse = track.increment.inverse()
            track.voxel_map = track.voxel_map.transformed(
                inverse.rotation, inverse.translation
            )


def run_pipeline(
    sequence: Sequence | str | os.PathLike,
    config: RunConfig,
    output_dir: str | os.PathLike | None = None,
) -> RunReport:
    """Run the full pipeline over a sequence; see the module docstring."""
    if not isinstance(sequence, Sequence):
        sequence = read_sequence(sequence)
    rng = np.random.default_rng(config.seed)
    report = RunReport()
    report.static_map = StaticMap.create(config.mapping)
    report.semantic_map = SemanticMap4D()
    tracker = _TrackerState(config, report)

    detections_enabled = config.use_detections and sequence.detections is not None
    ego_pose = Pose.identity()
    map_correction = Pose.identity()
    last_increment = Pose.identity()
    previous_candidates: PreviousCandidates | None = None

    for frame, scan in enumerate(sequence.scans):
        raw_detections = sequence.detections[frame] if detections_enabled else None
        try:
            with _Timer(report, "perception"):
                features, boxes, labels = perceive(scan, raw_detections, config.perception)

            with _Timer(report, "consistency"):
                if frame == 0 or previous_candidates is None:
                    checked = None
                else:
                    checked = check(
                        features, previous_candidates, last_increment, config.consistency, rng
                    )
                    if config.log_consistency:
                        report.consistency_log.append(
                            {
                                "frame": frame,
                                "input_ground": features.ground_features.indices,
                                "input_edge": features.edge_features.indices,
                                "input_surface": features.surface_features.indices,
                                "kept_ground": checked.ground.indices,
                                "kept_edge": checked.edge.indices,
                                "kept_surface": checked.surface.indices,
                                "degraded": checked.degraded,
                            }
                        )

            with _Timer(report, "ego_odometry"):
                if checked is None:
                    increment = Pose.identity()
                else:
                    estimate = ego_odometry.estimate(
                        checked.ground,
                        checked.edge,
                        checked.surface,
                        features.avg_ground_smoothness,
                        previous_candidates,
                        checked.increment,
                        config.ego,
                        degraded_input=checked.degraded,
                    )
                    increment = estimate.pose
                ego_pose = ego_pose.compose(increment) if frame > 0 else Pose.identity()
                last_increment = increment
                report.ego_odom.append((scan.timestamp, ego_pose))

            with _Timer(report, "tracking"):
                advances = tracker.step(frame, scan, boxes or [], increment, ego_pose)

            with _Timer(report, "object_odometry"):
                for track, relative_increment, prev_object_to_lidar, observed in advances:
                    chain = report.chains.get(track.track_id)
                    if chain is None:
                        continue
                    advance_chain(
                        chain,
                        frame,
                        increment,
                        relative_increment,
                        prev_object_to_lidar,
                        observed,
                    )

            with _Timer(report, "mapping"):
                previous_candidates, frame_candidates = _dedistorted_candidates(
                    features, increment, scan
                )
                insert = frame % max(config.mapping.insert_every, 1) == 0
                map_pose, refined = map_refine(
                    frame_candidates,
                    ego_pose,
                    report.static_map,
                    map_correction,
                    config.mapping,
                    insert=insert,
                )
                map_correction = compute_correction(ego_pose, map_pose)
                report.ego_map.append((scan.timestamp, map_pose))
                report.semantic_map.record_correction(frame, map_correction)
                confirmed_states = []
                for track in tracker.tracks:
                    if track.state != tracking.CONFIRMED:
                        continue
                    chain = report.chains.get(track.track_id)
                    if chain is None or chain.poses[-1][0] != frame:
                        continue
                    confirmed_states.append(
                        (track.track_id, chain.latest(), track.last_box.size)
                    )
                report.semantic_map.correct_objects(
                    frame, scan.timestamp, map_correction, confirmed_states
                )
        except Exception as exc:  # noqa: BLE001 - report the failing frame
            report.failure_frame = frame
            report.failure_reason = f"{type(exc).__name__}: {exc}"
            break
        report.frames = frame + 1

    if output_dir is not None:
        _write_outputs(report, config, output_dir)
    return report


def _write_outputs(report: RunReport, config: RunConfig, output_dir) -> None:
    output_dir = os.fspath(output_dir)
    os.makedirs(output_dir, exist_ok=True)
    write_tum(os.path.join(output_dir, "ego_odom.tum"), report.ego_odom)
    write_tum(os.path.join(output_dir, "ego_map.tum"), report.ego_map)

    objects_dir = os.path.join(output_dir, "objects")
    os.makedirs(objects_dir, exist_ok=True)
    frame_times = {i: t for i, (t, _) in enumerate(report.ego_odom)}
    for track_id, chain in sorted(report.chains.items()):
        rows = [
            pose_to_tum_row(frame_times.get(frame, float(frame)), pose)
            for frame, pose in chain.poses
        ]
        write_tum(os.path.join(objects_dir, f"object_{track_id}_odom.tum"), rows)

    if report.static_map is not None:
        for name, cloud in (
            ("ground", report.static_map.ground),
            ("edge", report.static_map.edge),
            ("surface", report.static_map.surface),
        ):
            records = np.zeros(len(cloud), dtype=SCAN_DTYPE)
            if len(cloud):
                records["x"] = cloud.points[:, 0]
                records["y"] = cloud.points[:, 1]
                records["z"] = cloud.points[:, 2]
            records.tofile(os.path.join(output_dir, f"map_{name}.bin"))
    if report.semantic_map is not None:
        report.semantic_map.export_json(os.path.join(output_dir, "semantic_map.json"))

    with open(os.path.join(output_dir, "tracking.csv"), "w", newline="") as handle:
        writer = csv.DictWriter(
            handle,
            fieldnames=["frame", "track_id", "state", "x", "y", "z", "yaw", "fit_quality", "n_points"],
        )
        writer.writeheader()
        for row in report.tracking_rows:
            writer.writerow({k: (f"{v:.9f}" if isinstance(v, float) else v) for k, v in row.items()})

    with open(os.path.join(output_dir, "timing.csv"), "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame"] + list(MODULE_NAMES))
        n = max((len(v) for v in report.timings.values()), default=0)
        for i in range(n):
            row = [i]
            for name in MODULE_NAMES:
                samples = report.timings.get(name, [])
                row.append(f"{samples[i] * 1000.0:.6f}" if i < len(samples) else "")
            writer.writerow(row)

    manifest = {
        "frames": report.frames,
        "failure_frame": report.failure_frame,
        "failure_reason": report.failure_reason,
        "config": {k: v for k, v in config_to_flat_dict(config).items()},
        "outputs": [
            "ego_odom.tum",
            "ego_map.tum",
            "objects/",
            "map_ground.bin",
            "map_edge.bin",
            "map_surface.bin",
            "semantic_map.json",
            "tracking.csv",
            "timing.csv",
        ],
    }
    with open(os.path.join(output_dir, "run_manifest.json"), "w") as handle:
        json.dump(manifest, handle, indent=2)
    report.output_dir = output_dir


def timing_report(report: RunReport) -> dict[str, dict[str, float]]:
    """Mean and percentile wall-clock milliseconds per module."""
    summary = {}
    for name in MODULE_NAMES:
        samples = np.array(report.timings.get(name, [])) * 1000.0
        if len(samples) == 0:
            continue
        summary[name] = {
            "mean_ms": float(samples.mean()),
            "p50_ms": float(np.percentile(samples, 50)),
            "p90_ms": float(np.percentile(samples, 90)),
            "max_ms": float(samples.max()),
            "samples": int(len(samples)),
        }
    return summary


def write_timing_summary(report: RunReport, path) -> None:
    summary = timing_report(report)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["module", "mean_ms", "p50_ms", "p90_ms", "max_ms", "samples"])
        for name, stats in summary.items():
            writer.writerow(
                [
                    name,
                    f"{stats['mean_ms']:.4f}",
                    f"{stats['p50_ms']:.4f}",
                    f"{stats['p90_ms']:.4f}",
                    f"{stats['max_ms']:.4f}",
                    stats["samples"],
                ]
            )
