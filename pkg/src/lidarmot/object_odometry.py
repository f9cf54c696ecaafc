"""Object odometry: lifting per-object relative increments into world-frame
object poses through the object-fixed coordinate construction.

With sigma the ego increment and H the object's relative increment (both
mapping current-frame into previous-frame coordinates), the object's motion
in the previous lidar frame is sigma o H^-1; conjugating by the previous
object-to-lidar transform expresses it in the body frame, where increments
accumulate by right-composition exactly like ego poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .geometry import Pose


def lidar_frame_increment(ego_increment: Pose, relative_increment: Pose) -> Pose:
    """Absolute object motion seen from the previous lidar frame."""
    return ego_increment.compose(relative_increment.inverse())


def object_frame_increment(lidar_increment: Pose, object_to_lidar_prev: Pose) -> Pose:
    """Conjugate the lidar-frame motion into the object-fixed frame."""
    return object_to_lidar_prev.inverse().compose(lidar_increment).compose(object_to_lidar_prev)


@dataclass
class ObjectPoseChain:
    """Per-frame world-frame (odom) poses of one tracked object.

    ``detection_poses`` keeps the object-to-lidar transform observed at each
    frame with a detection; together with the ego trajectory it gives the
    direct world-frame pose for cross-checking the accumulated chain.
    """

    object_id: int
    creation_frame: int
    creation_object_to_lidar: Pose
    poses: list[tuple[int, Pose]] = field(default_factory=list)
    detection_poses: dict[int, Pose] = field(default_factory=dict)

    def latest(self) -> Pose:
        return self.poses[-1][1]

    def frames(self) -> list[int]:
        return [frame for frame, _ in self.poses]


def initialize_chain(
    object_id: int, frame: int, ego_pose: Pose, object_to_lidar: Pose
) -> ObjectPoseChain:
    """Anchor a chain at the first detected frame: T_world_object = ego o box."""
    chain = ObjectPoseChain(
        object_id=object_id,
        creation_frame=frame,
        creation_object_to_lidar=object_to_lidar,
    )
    chain.poses.append((frame, ego_pose.compose(object_to_lidar)))
    chain.detection_poses[frame] = object_to_lidar
    return chain


def accumulate_object(chain: ObjectPoseChain, frame: int, increment: Pose) -> Pose:
    """Append the next pose by composing the body-frame increment."""
    next_pose = chain.latest().compose(increment)
    chain.poses.append((frame, next_pose))
    return next_pose


def advance_chain(
    chain: ObjectPoseChain,
    frame: int,
    ego_increment: Pose,
    relative_increment: Pose,
    object_to_lidar_prev: Pose,
    observed_object_to_lidar: Pose | None = None,
) -> Pose:
    """One full step: Eq.-style lift of (sigma, H) into the body frame and
    accumulation; records the directly observed box pose when present."""
    lidar_inc = lidar_frame_increment(ego_increment, relative_increment)
    body_inc = object_frame_increment(lidar_inc, object_to_lidar_prev)
    pose = accumulate_object(chain, frame, body_inc)
    if observed_object_to_lidar is not None:
        chain.detection_poses[frame] = observed_object_to_lidar
    return pose
