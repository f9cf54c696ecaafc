"""Lidar odometry, multi-object tracking, and 4D semantic mapping toolkit."""

__version__ = "0.1.0"
