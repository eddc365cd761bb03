"""Planar geometry and the robot state shared by every other module."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# state vector layout used by the optimizer: x, y, theta, vx, vy, bg, bax, bay
STATE_DIM = 8


def wrap_angle(raw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    raw = float(raw)
    if not math.isfinite(raw):
        raise ValueError(f"cannot wrap non-finite angle {raw!r}")
    r = math.remainder(raw, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


# d/dtheta R(theta) = R(theta) @ SKEW
SKEW = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def t(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        return rot(self.theta)

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous transform."""
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = self.t
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose2":
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    __matmul__ = compose

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def between(self, other: "Pose2") -> "Pose2":
        """Pose of ``other`` expressed in the frame of ``self``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = other.x - self.x, other.y - self.y
        return Pose2(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Map Nx2 points from this pose's frame into the parent frame."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return pts @ self.rotation().T + self.t

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def between(a: Pose2, b: Pose2) -> Pose2:
    return a.between(b)


def inverse(p: Pose2) -> Pose2:
    return p.inverse()


def _vec2(v) -> np.ndarray:
    out = np.array(v, dtype=float).reshape(2)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RobotState:
    """Planar pose, world-frame velocity and IMU biases."""

    pose: Pose2 = field(default_factory=Pose2)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    gyro_bias: float = 0.0
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "velocity", _vec2(self.velocity))
        object.__setattr__(self, "accel_bias", _vec2(self.accel_bias))
        object.__setattr__(self, "gyro_bias", float(self.gyro_bias))
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("RobotState components must be finite")

    @property
    def bias(self) -> np.ndarray:
        return np.array([self.gyro_bias, *self.accel_bias])

    def to_vector(self) -> np.ndarray:
        p = self.pose
        return np.array([p.x, p.y, p.theta, *self.velocity, self.gyro_bias, *self.accel_bias])

    @classmethod
    def from_vector(cls, v) -> "RobotState":
        v = np.asarray(v, dtype=float)
        return cls(Pose2(v[0], v[1], v[2]), v[3:5], v[5], v[6:8])

    def retract(self, delta) -> "RobotState":
        """Apply an additive local perturbation (dx, dy, dtheta, dv, db)."""
        return RobotState.from_vector(self.to_vector() + np.asarray(delta, dtype=float))

    def with_bias(self, gyro_bias: float, accel_bias) -> "RobotState":
        return RobotState(self.pose, self.velocity, gyro_bias, accel_bias)

    def __eq__(self, other):
        if not isinstance(other, RobotState):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())

    __hash__ = None
