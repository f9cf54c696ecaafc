"""Shared fixtures: small simulated sequences reused across test modules."""

import numpy as np
import pytest

from lidarmot.geometry import Pose
from lidarmot.simulate import (
    BoxNoiseConfig,
    ScannerConfig,
    corridor_world,
    room_world,
    scene_setup,
    simulate_scan,
    simulate_sequence,
    stationary,
    straight_line,
)


@pytest.fixture(scope="session")
def small_scanner():
    return ScannerConfig(num_rings=12, azimuth_steps=360)


@pytest.fixture(scope="session")
def static_room_scan(small_scanner):
    """One noise-free scan of the closed room from a stationary sensor."""
    world = room_world()
    trajectory = stationary(Pose.from_components(0, 0, 1.4, 0, 0, 0))
    scan = simulate_scan(world, trajectory, 0, small_scanner)
    return world, trajectory, scan


@pytest.fixture(scope="session")
def moving_corridor_frames():
    """Two consecutive noise-free frames with a translating sensor, plus the
    ground-truth increments of both sweeps."""
    world = corridor_world(wall_clearance=0.3)
    trajectory = straight_line(start=[0, 0, 1.4], velocity=[2.0, 0.0, 0.0])
    cfg = ScannerConfig()
    scans = [simulate_scan(world, trajectory, i, cfg) for i in range(2)]
    dt = cfg.frame_period
    increments = [
        trajectory(i * dt).inverse().compose(trajectory((i + 1) * dt)) for i in range(2)
    ]
    return world, trajectory, cfg, scans, increments


@pytest.fixture(scope="session")
def crossing_sequence():
    """Noisy 30-frame crossing scene with oracle detections."""
    world, ego = scene_setup("crossing", ego_speed=2.0)
    sequence = simulate_sequence(
        world,
        ego,
        30,
        ScannerConfig(range_noise_sigma=0.01),
        BoxNoiseConfig(center_sigma=0.05, yaw_sigma=0.02),
        seed=11,
    )
    return world, ego, sequence
