"""LiDAR-inertial-encoder factor-graph SLAM for planar robots."""

__version__ = "0.1.0"
