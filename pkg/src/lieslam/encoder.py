"""Differential-drive wheel odometry and IMU-consistency slip rejection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Pose2, wrap_angle


@dataclass(frozen=True)
class EncoderSample:
    t: float
    left_ticks: int
    right_ticks: int


@dataclass(frozen=True)
class EncoderParams:
    ticks_per_meter: float = 10000.0
    wheel_base: float = 0.3
    sigma_d: float = 0.005  # m/sqrt(m)
    sigma_theta: float = 0.005  # rad/sqrt(m)

    def __post_init__(self):
        if not self.ticks_per_meter > 0:
            raise ValueError("ticks_per_meter must be positive")
        if not self.wheel_base > 0:
            raise ValueError("wheel_base must be positive")


@dataclass(frozen=True)
class WheelOdomDelta:
    """Relative pose over an interval; covariance is ordered (theta, x, y)."""

    delta: Pose2
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    path_length: float = 0.0


@dataclass(frozen=True)
class SlipReport:
    discrepancy: float
    excluded: bool
    rotation_discrepancy: float = 0.0


def _sinc(x: float) -> float:
    if abs(x) < 1e-6:
        return 1.0 - x * x / 6.0
    return math.sin(x) / x


def arc_step(pose: Pose2, d_left: float, d_right: float, wheel_base: float) -> Pose2:
    """Exact constant-curvature motion for one pair of wheel displacements."""
    d = 0.5 * (d_left + d_right)
    dth = (d_right - d_left) / wheel_base
    chord = d * _sinc(0.5 * dth)
    heading = pose.theta + 0.5 * dth
    return Pose2(
        pose.x + chord * math.cos(heading),
        pose.y + chord * math.sin(heading),
        pose.theta + dth,
    )


def _ticks_at(samples: Sequence[EncoderSample], times: np.ndarray, t: float) -> tuple[float, float]:
    k = int(np.searchsorted(times, t, side="left"))
    if k < len(samples) and times[k] == t:
        s = samples[k]
        return float(s.left_ticks), float(s.right_ticks)
    a, b = samples[k - 1], samples[k]
    f = (t - a.t) / (b.t - a.t)
    return (
        a.left_ticks + f * (b.left_ticks - a.left_ticks),
        a.right_ticks + f * (b.right_ticks - a.right_ticks),
    )


def integrate_encoder(
    samples: Sequence[EncoderSample],
    t_i: float,
    t_j: float,
    params: EncoderParams,
    times: np.ndarray | None = None,
) -> WheelOdomDelta:
    """Wheel odometry between ``t_i`` and ``t_j``.

    Tick counts are linearly interpolated at the interval ends. ``times`` may be
    passed to avoid rebuilding the timestamp array on every call.
    """
    if t_j < t_i:
        raise ValueError(f"reversed interval [{t_i}, {t_j}]")
    if times is None:
        times = np.fromiter((s.t for s in samples), float, len(samples))
    if len(samples) == 0 or t_i < times[0] or t_j > times[-1]:
        raise ValueError(f"encoder samples do not bracket [{t_i}, {t_j}]")

    lo = int(np.searchsorted(times, t_i, side="right"))
    hi = int(np.searchsorted(times, t_j, side="left"))
    ticks = [_ticks_at(samples, times, t_i)]
    ticks += [(float(s.left_ticks), float(s.right_ticks)) for s in samples[lo:hi]]
    ticks.append(_ticks_at(samples, times, t_j))

    pose = Pose2()
    path = 0.0
    tpm = params.ticks_per_meter
    for (l0, r0), (l1, r1) in zip(ticks, ticks[1:]):
        dl, dr = (l1 - l0) / tpm, (r1 - r0) / tpm
        if dl == 0.0 and dr == 0.0:
            continue
        pose = arc_step(pose, dl, dr, params.wheel_base)
        path += 0.5 * (abs(dl) + abs(dr))

    cov = path * np.diag([params.sigma_theta**2, params.sigma_d**2, params.sigma_d**2])
    return WheelOdomDelta(pose, cov, path)


def detect_slip(
    enc: WheelOdomDelta, imu_predicted: Pose2, tau_e: float, tau_theta: float | None = None
) -> SlipReport:
    """Flag encoder intervals whose translation disagrees with the IMU prediction.

    With ``tau_theta`` set, a heading disagreement above it also excludes the
    interval; slip during an in-place turn leaves the translation untouched.
    """
    d = math.hypot(enc.delta.x - imu_predicted.x, enc.delta.y - imu_predicted.y)
    dth = abs(wrap_angle(enc.delta.theta - imu_predicted.theta))
    excluded = d > tau_e or (tau_theta is not None and dth > tau_theta)
    return SlipReport(d, excluded, dth)
