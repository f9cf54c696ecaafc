"""Synthetic dynamic-world generator: raycast scans, oracle detections, scenes.

The scanner model is a spinning multi-ring lidar. Points are emitted column
by column over one revolution; each column is raycast against the world at
its own emission time, so both sensor and body motion show up as intra-sweep
distortion, exactly like a real rotating unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence as Seq

import numpy as np

from .dataset import DetectedBox, LidarScan, Sequence
from .geometry import Pose, pose_to_tum_row, wrap_angle


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


class ConstantTwistTrajectory:
    """start_pose composed with exp(t * twist): smooth screw motion."""

    def __init__(self, start_pose: Pose, twist: np.ndarray):
        self.start_pose = start_pose
        self.twist = np.asarray(twist, dtype=float).reshape(6)

    def __call__(self, t: float) -> Pose:
        return self.start_pose.compose(Pose.exp(t * self.twist))

    def batch(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rotations = np.empty((len(times), 3, 3))
        positions = np.empty((len(times), 3))
        for i, t in enumerate(times):
            pose = self(float(t))
            rotations[i] = pose.rotation
            positions[i] = pose.translation
        return rotations, positions


def stationary(pose: Pose | None = None) -> ConstantTwistTrajectory:
    return ConstantTwistTrajectory(pose or Pose.identity(), np.zeros(6))


def straight_line(
    start: np.ndarray, velocity: np.ndarray, yaw: float = 0.0, yaw_rate: float = 0.0
) -> ConstantTwistTrajectory:
    """Constant world-frame velocity with optional constant yaw rate.

    The twist is expressed in the body frame, so the velocity is rotated back
    by the starting yaw.
    """
    start_pose = Pose.from_components(*start, 0.0, 0.0, yaw)
    vel_body = start_pose.rotation.T @ np.asarray(velocity, dtype=float)
    if abs(yaw_rate) < 1e-12:
        twist = np.array([*vel_body, 0.0, 0.0, 0.0])
    else:
        twist = np.array([*vel_body, 0.0, 0.0, yaw_rate])
    return ConstantTwistTrajectory(start_pose, twist)


# --------------------------------------------------------------------------
# World model
# --------------------------------------------------------------------------


@dataclass
class StaticBox:
    size: np.ndarray
    pose: Pose

    def __post_init__(self) -> None:
        self.size = np.asarray(self.size, dtype=float).reshape(3)


@dataclass
class DynamicBox:
    size: np.ndarray
    trajectory: Callable[[float], Pose]
    detectable: bool = True

    def __post_init__(self) -> None:
        self.size = np.asarray(self.size, dtype=float).reshape(3)


@dataclass
class WorldModel:
    """Ground plane (n . p = offset), static boxes, and moving boxes."""

    ground_normal: np.ndarray | None = None
    ground_offset: float = 0.0
    static_boxes: list[StaticBox] = field(default_factory=list)
    dynamic_boxes: list[DynamicBox] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.ground_normal is not None:
            normal = np.asarray(self.ground_normal, dtype=float).reshape(3)
            self.ground_normal = normal / np.linalg.norm(normal)

    def validate_motion(
        self, frame_count: int, frame_period: float, max_speed: float
    ) -> None:
        """Check dynamic trajectories stay continuous at the configured speed cap."""
        for k, body in enumerate(self.dynamic_boxes):
            prev = body.trajectory(0.0)
            for i in range(1, frame_count + 1):
                cur = body.trajectory(i * frame_period)
                step = np.linalg.norm(cur.translation - prev.translation)
                if step > max_speed * frame_period + 1e-9:
                    raise ValueError(
                        f"dynamic body {k} jumps {step:.3f} m in one frame "
                        f"(cap {max_speed * frame_period:.3f} m)"
                    )
                prev = cur


# --------------------------------------------------------------------------
# Scanner
# --------------------------------------------------------------------------


@dataclass
class ScannerConfig:
    num_rings: int = 16
    azimuth_steps: int = 600
    min_elevation_deg: float = -14.0
    max_elevation_deg: float = 6.0
    max_range: float = 50.0
    min_range: float = 0.3
    range_noise_sigma: float = 0.0
    frame_period: float = 0.1
    horizontal_fov_deg: float = 360.0

    def elevations(self) -> np.ndarray:
        return np.radians(
            np.linspace(self.min_elevation_deg, self.max_elevation_deg, self.num_rings)
        )


@dataclass
class BoxNoiseConfig:
    center_sigma: float = 0.0
    yaw_sigma: float = 0.0
    size_sigma: float = 0.0
    dropout_prob: float = 0.0
    min_points: int = 10
    inflate: float = 1.05
    confidence_model: str = "range_decay"  # or "constant"
    constant_confidence: float = 1.0


def _ray_box_hits(
    origins: np.ndarray,
    dirs: np.ndarray,
    box_rot: np.ndarray,
    box_pos: np.ndarray,
    half_extent: np.ndarray,
) -> np.ndarray:
    """Slab-test ray/box intersection distances; inf where the ray misses.

    ``origins``/``dirs`` are (N, 3) in world coordinates; ``box_rot``/``box_pos``
    may be a single pose or per-ray stacks (N, 3, 3) / (N, 3).
    """
    if box_rot.ndim == 2:
        local_o = (origins - box_pos) @ box_rot
        local_d = dirs @ box_rot
    else:
        offset = origins - box_pos
        local_o = np.einsum("nij,ni->nj", box_rot, offset)
        local_d = np.einsum("nij,ni->nj", box_rot, dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = 1.0 / local_d
        t1 = (-half_extent - local_o) * inv_d
        t2 = (half_extent - local_o) * inv_d
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    # Rays parallel to a slab: inv_d = inf gives +-inf bounds, handled by min/max.
    parallel_miss = np.any(
        (np.abs(local_d) < 1e-12) & (np.abs(local_o) > half_extent), axis=1
    )
    hits = np.where((t_near <= t_far) & (t_far > 0.0) & ~parallel_miss, t_near, np.inf)
    return np.where(hits > 0.0, hits, np.inf)


def simulate_scan(
    world: WorldModel,
    sensor_pose_fn: Callable[[float], Pose],
    frame_index: int,
    config: ScannerConfig,
    rng: np.random.Generator | None = None,
) -> LidarScan:
    """Raycast one sweep. The sweep covers one frame period ending at the
    frame timestamp; rel_time is the azimuth fraction of the revolution."""
    n_rings = config.num_rings
    n_az = config.azimuth_steps
    period = config.frame_period

    az_fraction = np.arange(n_az) / n_az
    azimuths = -math.pi + 2.0 * math.pi * az_fraction
    if config.horizontal_fov_deg < 360.0:
        half_fov = math.radians(config.horizontal_fov_deg) / 2.0
        keep = np.abs(azimuths) <= half_fov + 1e-12
        az_fraction = az_fraction[keep]
        azimuths = azimuths[keep]
        n_az = len(azimuths)

    emit_times = (frame_index + az_fraction) * period
    elevations = config.elevations()

    cos_el = np.cos(elevations)[:, None]
    sin_el = np.sin(elevations)[:, None]
    cos_az = np.cos(azimuths)[None, :]
    sin_az = np.sin(azimuths)[None, :]
    dirs_local = np.stack(
        [cos_el * cos_az, cos_el * sin_az, np.broadcast_to(sin_el, (n_rings, n_az))],
        axis=2,
    )

    if hasattr(sensor_pose_fn, "batch"):
        sensor_rot, sensor_pos = sensor_pose_fn.batch(emit_times)
    else:
        poses = [sensor_pose_fn(float(t)) for t in emit_times]
        sensor_rot = np.stack([p.rotation for p in poses])
        sensor_pos = np.stack([p.translation for p in poses])

    dirs_world = np.einsum("aij,raj->rai", sensor_rot, dirs_local)
    origins = np.broadcast_to(sensor_pos, (n_rings, n_az, 3))

    flat_dirs = dirs_world.reshape(-1, 3)
    flat_origins = origins.reshape(-1, 3)
    best_t = np.full(n_rings * n_az, np.inf)
    best_id = np.full(n_rings * n_az, -1, dtype=np.int16)

    if world.ground_normal is not None:
        normal = world.ground_normal
        denom = flat_dirs @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = (world.ground_offset - flat_origins @ normal) / denom
        valid = np.isfinite(t_ground) & (t_ground > config.min_range)
        best_t = np.where(valid & (t_ground < best_t), t_ground, best_t)

    for box in world.static_boxes:
        t_hit = _ray_box_hits(
            flat_origins, flat_dirs, box.pose.rotation, box.pose.translation, 0.5 * box.size
        )
        closer = (t_hit > config.min_range) & (t_hit < best_t)
        best_t = np.where(closer, t_hit, best_t)

    for body_id, body in enumerate(world.dynamic_boxes):
        if hasattr(body.trajectory, "batch"):
            body_rot, body_pos = body.trajectory.batch(emit_times)
        else:
            poses = [body.trajectory(float(t)) for t in emit_times]
            body_rot = np.stack([p.rotation for p in poses])
            body_pos = np.stack([p.translation for p in poses])
        # Expand the per-column body pose to every ring of that column.
        rot_full = np.broadcast_to(body_rot, (n_rings, n_az, 3, 3)).reshape(-1, 3, 3)
        pos_full = np.broadcast_to(body_pos, (n_rings, n_az, 3)).reshape(-1, 3)
        t_hit = _ray_box_hits(flat_origins, flat_dirs, rot_full, pos_full, 0.5 * body.size)
        closer = (t_hit > config.min_range) & (t_hit < best_t)
        best_t = np.where(closer, t_hit, best_t)
        best_id = np.where(closer, np.int16(body_id), best_id)

    hit = best_t <= config.max_range
    ranges = best_t[hit]
    if rng is not None and config.range_noise_sigma > 0.0:
        ranges = ranges + rng.normal(0.0, config.range_noise_sigma, size=len(ranges))

    ring_grid, az_grid = np.meshgrid(np.arange(n_rings), np.arange(n_az), indexing="ij")
    # Column-major order keeps emission time non-decreasing in the output.
    order = np.argsort(az_grid.reshape(-1)[hit], kind="stable")

    points = ranges[:, None] * dirs_local.reshape(-1, 3)[hit]
    return LidarScan(
        points=points[order],
        rel_time=az_fraction[az_grid.reshape(-1)[hit]][order],
        ring=ring_grid.reshape(-1)[hit][order].astype(np.uint16),
        timestamp=(frame_index + 1) * period,
        frame_index=frame_index,
        gt_object_ids=best_id[hit][order],
    )


# --------------------------------------------------------------------------
# Oracle detector
# --------------------------------------------------------------------------


def _inside_moving_box(
    hit_points: np.ndarray,
    emit_times: np.ndarray,
    sensor_rot: np.ndarray,
    sensor_pos: np.ndarray,
    body: DynamicBox,
    inflate: float,
) -> np.ndarray:
    """Containment test against the body pose at each point's emission time.

    ``hit_points`` are raw returns in the instantaneous sensor frame; they are
    lifted to world coordinates with the per-point sensor pose first.
    """
    world_pts = np.einsum("nij,nj->ni", sensor_rot, hit_points) + sensor_pos
    if hasattr(body.trajectory, "batch"):
        body_rot, body_pos = body.trajectory.batch(emit_times)
    else:
        poses = [body.trajectory(float(t)) for t in emit_times]
        body_rot = np.stack([p.rotation for p in poses])
        body_pos = np.stack([p.translation for p in poses])
    local = np.einsum("nij,ni->nj", body_rot, world_pts - body_pos)
    half = 0.5 * body.size * inflate
    return np.all(np.abs(local) <= half, axis=1)


def oracle_detect(
    world: WorldModel,
    scan: LidarScan,
    sensor_pose_fn,
    noise: BoxNoiseConfig,
    rng: np.random.Generator,
) -> list[DetectedBox]:
    """Ground-truth-backed detector standing in for a learned network.

    Emits one noisy box per visible, detectable dynamic body. Point indices
    come from the true raycast hits intersected with the true (un-noised) box
    evaluated at each point's emission time, so occlusion, motion smear, and
    minimum-return gating are all handled by construction.
    """
    detections: list[DetectedBox] = []
    if scan.gt_object_ids is None:
        return detections
    points = scan.points.astype(float)
    frame_period = scan.timestamp / (scan.frame_index + 1)
    sensor_pose = sensor_pose_fn(scan.timestamp)
    for body_id, body in enumerate(world.dynamic_boxes):
        if not body.detectable:
            continue
        hits = np.nonzero(scan.gt_object_ids == body_id)[0]
        if len(hits) < noise.min_points:
            continue
        relative = sensor_pose.inverse().compose(body.trajectory(scan.timestamp))
        true_center = relative.translation
        true_yaw = math.atan2(relative.rotation[1, 0], relative.rotation[0, 0])
        emit_times = (scan.frame_index + scan.rel_time[hits].astype(float)) * frame_period
        if hasattr(sensor_pose_fn, "batch"):
            sensor_rot, sensor_pos = sensor_pose_fn.batch(emit_times)
        else:
            poses = [sensor_pose_fn(float(t)) for t in emit_times]
            sensor_rot = np.stack([p.rotation for p in poses])
            sensor_pos = np.stack([p.translation for p in poses])
        point_indices = hits[
            _inside_moving_box(
                points[hits], emit_times, sensor_rot, sensor_pos, body, noise.inflate
            )
        ]
        if len(point_indices) < noise.min_points:
            continue
        if rng.random() < noise.dropout_prob:
            continue
        center = true_center + rng.normal(0.0, noise.center_sigma, size=3)
        yaw = wrap_angle(true_yaw + rng.normal(0.0, noise.yaw_sigma))
        size = np.maximum(body.size + rng.normal(0.0, noise.size_sigma, size=3), 0.05)
        if noise.confidence_model == "constant":
            confidence = noise.constant_confidence
        else:
            span = np.linalg.norm(true_center)
            confidence = float(np.clip(1.0 - span / 50.0, 0.1, 1.0))
        detections.append(
            DetectedBox(
                center=center,
                size=size,
                yaw=yaw,
                confidence=confidence,
                point_indices=point_indices,
                gt_id=body_id,
            )
        )
    return detections


# --------------------------------------------------------------------------
# Sequence generation
# --------------------------------------------------------------------------


def simulate_sequence(
    world: WorldModel,
    sensor_trajectory: Callable[[float], Pose],
    frame_count: int,
    scanner: ScannerConfig,
    box_noise: BoxNoiseConfig | None = None,
    seed: int = 0,
    with_detections: bool = True,
) -> Sequence:
    """Generate scans, oracle detections, and ground-truth trajectories."""
    rng = np.random.default_rng(seed)
    scans = []
    detections: list[list[DetectedBox]] | None = [] if with_detections else None
    noise = box_noise or BoxNoiseConfig()
    ego_rows = []
    object_rows: dict[int, list[np.ndarray]] = {
        k: [] for k, body in enumerate(world.dynamic_boxes) if body.detectable
    }
    for i in range(frame_count):
        scan = simulate_scan(world, sensor_trajectory, i, scanner, rng)
        scans.append(scan)
        stamp = scan.timestamp
        sensor_pose = sensor_trajectory(stamp)
        ego_rows.append(pose_to_tum_row(stamp, sensor_pose))
        for k in object_rows:
            object_rows[k].append(
                pose_to_tum_row(stamp, world.dynamic_boxes[k].trajectory(stamp))
            )
        if detections is not None:
            detections.append(oracle_detect(world, scan, sensor_trajectory, noise, rng))
    return Sequence(
        scans=scans,
        frame_period=scanner.frame_period,
        detections=detections,
        ego_truth=np.array(ego_rows),
        object_truth={k: np.array(v) for k, v in object_rows.items()},
        scanner_info=asdict(scanner),
    )


# --------------------------------------------------------------------------
# Preset scenes
# --------------------------------------------------------------------------


def corridor_world(
    length: float = 70.0,
    half_width: float = 8.0,
    baffle_spacing: float = 7.0,
    wall_clearance: float = 0.0,
) -> WorldModel:
    """Ground plane, two long walls, door-recess baffles, and low blocks.

    The baffles face along the corridor; without them a two-wall hallway
    leaves the along-corridor translation observable only through corner
    edges, which carry the scanner's azimuth quantization noise.
    ``wall_clearance`` lifts vertical structure off the floor, which keeps
    wall bases out of the ground label band for precision tests.
    """
    wall_height = 4.0 - wall_clearance
    walls = [
        StaticBox(
            size=np.array([length, 0.4, wall_height]),
            pose=Pose(
                np.eye(3),
                np.array(
                    [length / 2 - 10.0, sign * half_width, wall_clearance + wall_height / 2]
                ),
            ),
        )
        for sign in (-1.0, 1.0)
    ]
    clutter = []
    x = 0.0
    side = 1.0
    while x < length - 10.0:
        clutter.append(
            StaticBox(
                size=np.array([0.4, 3.0, wall_height]),
                pose=Pose(
                    np.eye(3),
                    np.array(
                        [x, side * (half_width - 1.5), wall_clearance + wall_height / 2]
                    ),
                ),
            )
        )
        clutter.append(
            StaticBox(
                size=np.array([1.6, 0.8, 1.2]),
                pose=Pose(
                    np.eye(3),
                    np.array([x + 3.0, -side * (half_width - 3.0), wall_clearance + 0.6]),
                ),
            )
        )
        x += baffle_spacing
        side = -side
    return WorldModel(
        ground_normal=np.array([0.0, 0.0, 1.0]),
        ground_offset=0.0,
        static_boxes=walls + clutter,
    )


def room_world(half_size: float = 12.0, wall_clearance: float = 0.0) -> WorldModel:
    """Closed square room with four walls and a few interior boxes."""
    walls = []
    wall_height = 4.0 - wall_clearance
    for axis, sign in ((0, -1), (0, 1), (1, -1), (1, 1)):
        center = np.zeros(3)
        center[axis] = sign * half_size
        center[2] = wall_clearance + wall_height / 2
        size = np.array([0.4, 2 * half_size, wall_height]) if axis == 0 else np.array(
            [2 * half_size, 0.4, wall_height]
        )
        walls.append(StaticBox(size=size, pose=Pose(np.eye(3), center)))
    lift = wall_clearance
    boxes = [
        StaticBox(size=np.array([1.0, 1.5, 1.0]), pose=Pose(np.eye(3), np.array([4.0, 3.0, lift + 0.5]))),
        StaticBox(size=np.array([1.2, 0.8, 1.6]), pose=Pose(np.eye(3), np.array([-5.0, 4.0, lift + 0.8]))),
        StaticBox(size=np.array([0.9, 0.9, 2.0]), pose=Pose(np.eye(3), np.array([-3.0, -6.0, lift + 1.0]))),
        StaticBox(size=np.array([2.0, 1.0, 0.8]), pose=Pose(np.eye(3), np.array([6.0, -4.0, lift + 0.4]))),
    ]
    return WorldModel(
        ground_normal=np.array([0.0, 0.0, 1.0]),
        ground_offset=0.0,
        static_boxes=walls + boxes,
    )


def crossing_world(num_objects: int = 4) -> WorldModel:
    """Walled arena with cars whose paths cross near a slow ego.

    Interior clutter stays below the car bodies and the lane timing is
    staggered, so trajectories genuinely intersect (closest pair approach
    about a meter) while every car remains visible to the sensor in every
    frame of a 50-frame run.
    """
    half = 22.0
    walls = []
    for axis, sign in ((0, -1), (0, 1), (1, -1), (1, 1)):
        center = np.zeros(3)
        center[axis] = sign * half
        center[2] = 2.0
        size = np.array([0.4, 2 * half, 4.0]) if axis == 0 else np.array(
            [2 * half, 0.4, 4.0]
        )
        walls.append(StaticBox(size=size, pose=Pose(np.eye(3), center)))
    clutter = [
        StaticBox(size=np.array([1.6, 1.0, 0.5]), pose=Pose(np.eye(3), np.array([-12.0, -9.0, 0.25]))),
        StaticBox(size=np.array([1.0, 1.6, 0.5]), pose=Pose(np.eye(3), np.array([-9.0, 9.0, 0.25]))),
        StaticBox(size=np.array([1.2, 1.2, 0.5]), pose=Pose(np.eye(3), np.array([10.0, -12.0, 0.25]))),
        StaticBox(size=np.array([1.4, 0.9, 0.5]), pose=Pose(np.eye(3), np.array([14.0, 10.0, 0.25]))),
    ]
    world = WorldModel(
        ground_normal=np.array([0.0, 0.0, 1.0]),
        ground_offset=0.0,
        static_boxes=walls + clutter,
    )
    car = np.array([4.0, 1.8, 1.6])
    lanes = [
        straight_line(start=[10.0, -10.0, 0.8], velocity=[-0.5, 2.0, 0.0], yaw=math.radians(104)),
        straight_line(start=[3.0, 12.0, 0.8], velocity=[0.5, -2.0, 0.0], yaw=math.radians(-76)),
        straight_line(start=[-8.0, 10.0, 0.8], velocity=[2.0, -0.5, 0.0], yaw=math.radians(-14)),
        straight_line(start=[14.0, 2.0, 0.8], velocity=[-2.0, 0.6, 0.0], yaw=math.radians(163)),
    ]
    for traj in lanes[:num_objects]:
        world.dynamic_boxes.append(DynamicBox(size=car, trajectory=traj))
    return world


def unknown_mover_world(speed: float = 9.0) -> WorldModel:
    """Corridor plus a large fast box the detector cannot see.

    The mover's heading is offset from its long axis so every face displaces
    between frames; a purely lengthwise slide would be self-similar and
    geometrically unobservable.
    """
    world = corridor_world()
    velocity = np.array([-speed * 0.87, speed * 0.5, 0.0])
    mover = DynamicBox(
        size=np.array([14.0, 2.8, 3.0]),
        trajectory=straight_line(start=[40.0, -2.0, 1.5], velocity=velocity, yaw=0.0),
        detectable=False,
    )
    world.dynamic_boxes.append(mover)
    return world


def scene_setup(
    name: str, ego_speed: float = 2.0
) -> tuple[WorldModel, ConstantTwistTrajectory]:
    """World plus a matching ego trajectory for each named preset scene."""
    if name == "corridor":
        return corridor_world(), straight_line(start=[0.0, 0.0, 1.4], velocity=[ego_speed, 0.0, 0.0])
    if name == "room":
        return room_world(), straight_line(
            start=[0.0, 0.0, 1.4], velocity=[0.3 * ego_speed, 0.1 * ego_speed, 0.0], yaw_rate=0.25
        )
    if name == "crossing":
        return crossing_world(), straight_line(
            start=[-6.0, -6.0, 1.5], velocity=[0.5 * ego_speed, 0.0, 0.0]
        )
    if name == "unknown-mover":
        return unknown_mover_world(), straight_line(
            start=[0.0, 0.0, 1.4], velocity=[ego_speed, 0.0, 0.0]
        )
    raise ValueError(f"unknown scene {name!r}; choose from {sorted(PRESET_SCENES)}")


PRESET_SCENES = {
    "corridor": corridor_world,
    "room": room_world,
    "crossing": crossing_world,
    "unknown-mover": unknown_mover_world,
}
