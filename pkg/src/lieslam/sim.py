"""Deterministic planar world simulator producing IMU, encoder, lidar and ground truth.

The motion profile is built on a fixed tick grid: straight legs accelerate and
brake over a single tick, turns happen in place at constant rate. Within one
tick either the heading or the velocity changes, never both, so the per-tick
kinematics are integrated exactly and Euler dead reckoning reproduces them.

Randomness comes from one numpy ``Generator`` over the PCG64 bit generator,
seeded with the user seed and consumed in a fixed order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core import wrap_angle
from .encoder import EncoderParams
from .imu import ImuNoiseParams
from .mapping import MeasureSpec
from .pipeline.dataset import (
    Dataset,
    EncRecord,
    GtRecord,
    ImuRecord,
    ScanRecord,
    quantize,
)


@dataclass(frozen=True)
class World:
    walls: np.ndarray  # (M, 4): x1, y1, x2, y2

    def __post_init__(self):
        w = np.array(self.walls, dtype=float).reshape(-1, 4)
        if not np.all(np.isfinite(w)):
            raise ValueError("wall coordinates must be finite")
        if np.any(np.hypot(w[:, 2] - w[:, 0], w[:, 3] - w[:, 1]) <= 0):
            raise ValueError("walls must have positive length")
        w.setflags(write=False)
        object.__setattr__(self, "walls", w)


def _polyline(vertices, closed=True) -> np.ndarray:
    v = np.asarray(vertices, dtype=float)
    nxt = np.roll(v, -1, axis=0) if closed else v[1:]
    v = v if closed else v[:-1]
    return np.hstack([v, nxt])


def corridor_vertices(a: float, b: float, c: float) -> np.ndarray:
    """Vertices of an L corridor, first leg along +x, second along +y.

    The frame origin sits on the centreline of the first leg, half a width in
    front of its end wall, which is where the robot starts.
    """
    h = 0.5 * c
    return np.array(
        [
            (-h, -h),
            (a - c - h, -h),
            (a - h, -h),
            (a - h, h),
            (a - h, b - h),
            (a - c - h, b - h),
            (a - c - h, h),
            (-h, h),
        ]
    )


def build_corridor_world(a: float, b: float, c: float) -> World:
    """L-shaped corridor: outer leg lengths ``a`` and ``b``, width ``c``."""
    if not (c > 0 and a > c and b > c):
        raise ValueError(f"need a, b > c > 0, got a={a}, b={b}, c={c}")
    return World(_polyline(corridor_vertices(a, b, c)))


def build_straight_corridor(length: float, width: float, behind: float = 0.0) -> World:
    """Closed straight corridor along +x starting ``behind`` metres behind the origin."""
    h = 0.5 * width
    return World(_polyline([(-behind, -h), (length - behind, -h), (length - behind, h), (-behind, h)]))


def build_cluttered_room() -> World:
    """Irregular 14-sided room with two free-standing obstacles."""
    k = np.arange(14)
    phi = 2 * math.pi * k / 14
    radius = 4.5 + 0.9 * np.sin(3 * phi + 0.4) + 0.5 * np.cos(5 * phi)
    outer = np.column_stack([radius * np.cos(phi), radius * np.sin(phi)])
    walls = [_polyline(outer)]
    walls.append(_polyline([(0.5, 1.6), (1.6, 2.3), (1.1, 2.9)]))
    walls.append(_polyline([(-1.9, -1.5), (-1.2, -2.4), (-0.6, -1.7)]))
    return World(np.vstack(walls))


def corridor_measure_spec(a: float, b: float, c: float, band: float = 0.75, margin: float = 1.0) -> MeasureSpec:
    """Regions for the corridor key distances in the frame of ``build_corridor_world``.

    a: first-leg end wall vs outer wall of the second leg; b: outer wall of the
    first leg vs end wall of the second leg; c: the two side walls of the first
    leg; alpha: outer corner between the first-leg outer wall and the
    second-leg outer wall.
    """
    h = 0.5 * c
    x_in = a - c - h
    x_out = a - h
    y_top = b - h
    return MeasureSpec(
        {
            "a": (
                (-h - band, -h + margin * 0.5, -h + band, h - margin * 0.5),
                (x_out - band, h + margin, x_out + band, y_top - margin),
            ),
            "b": (
                (-h + margin, -h - band, x_in - margin, -h + band),
                (x_in + margin * 0.5, y_top - band, x_out - margin * 0.5, y_top + band),
            ),
            "c": (
                (-h + margin, -h - band, x_in - margin, -h + band),
                (-h + margin, h - band, x_in - margin, h + band),
            ),
            "alpha": (
                (x_in - 3.0, -h - band, x_out - margin, -h + band),
                (x_out - band, -h + margin, x_out + band, h + 3.0),
            ),
        }
    )


def raycast_many(walls: np.ndarray, origins: np.ndarray, directions: np.ndarray, range_max: float) -> np.ndarray:
    """Nearest positive hit distance per ray; ``nan`` where nothing is within range."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 2)
    directions = np.asarray(directions, dtype=float).reshape(-1)
    d = np.column_stack([np.cos(directions), np.sin(directions)])  # (N, 2)
    a = walls[:, 0:2]
    e = walls[:, 2:4] - a  # (M, 2)
    ap = a[None, :, :] - origins[:, None, :]  # (N, M, 2)
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = (ap[..., 0] * e[None, :, 1] - ap[..., 1] * e[None, :, 0]) / denom
        u = (ap[..., 0] * d[:, None, 1] - ap[..., 1] * d[:, None, 0]) / denom
    ok = (denom != 0) & (t > 1e-12) & (u >= 0) & (u <= 1)
    t = np.where(ok, t, np.inf)
    best = t.min(axis=1)
    best[best > range_max] = np.nan
    return best


def raycast(world: World, origin, direction: float, range_max: float) -> float | None:
    r = raycast_many(world.walls, np.asarray(origin, dtype=float)[None, :], np.array([direction]), range_max)[0]
    return None if np.isnan(r) else float(r)


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: Sequence[tuple[float, float]]
    linear_speed: float = 0.5
    angular_speed: float = 0.5
    pause: float = 1.0  # stationary seconds before the first and after the last leg
    initial_heading: float | None = None

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError("a trajectory needs at least two waypoints")
        if not (self.linear_speed > 0 and self.angular_speed > 0):
            raise ValueError("speeds must be positive")


@dataclass(frozen=True)
class SensorRig:
    imu_rate: float = 100.0
    scan_rate: float = 10.0
    encoder_rate: float = 50.0
    beams: int = 360
    fov: float = 2 * math.pi
    range_max: float = 12.0
    sigma_range: float = 0.01
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    encoder_params: EncoderParams = field(default_factory=EncoderParams)
    slip_events: tuple = ()
    noise_scale: float = 1.0  # 0 switches every stochastic error source off

    def __post_init__(self):
        if not (self.imu_rate > 0 and self.scan_rate > 0 and self.encoder_rate > 0):
            raise ValueError("sensor rates must be positive")
        for ev in self.slip_events:
            if not 0 <= ev[2] < 1:
                raise ValueError("slip_factor must lie in [0, 1)")

    def beam_layout(self) -> tuple[float, float]:
        if math.isclose(self.fov, 2 * math.pi):
            return -math.pi, 2 * math.pi / self.beams
        return -0.5 * self.fov, self.fov / (self.beams - 1)


def _tick(rig: SensorRig) -> tuple[float, int, int]:
    """Common motion tick and its length in IMU and encoder samples."""
    fi = Fraction(rig.imu_rate).limit_denominator(1000)
    fe = Fraction(rig.encoder_rate).limit_denominator(1000)
    ratio = fi / fe
    if ratio.denominator == 1:
        per_imu, per_enc = ratio.numerator, 1
    else:
        per_imu, per_enc = ratio.numerator, ratio.denominator
    return per_imu / rig.imu_rate, per_imu, per_enc


@dataclass
class MotionProfile:
    """Per-IMU-step angular rate and body-forward acceleration, plus exact states."""

    dt: float
    omega: np.ndarray
    accel: np.ndarray
    x: np.ndarray  # (K+1, 5): x, y, theta, vx, vy at step boundaries

    @property
    def duration(self) -> float:
        return len(self.omega) * self.dt

    def pose_at(self, t: np.ndarray) -> np.ndarray:
        """Exact (x, y, theta) at arbitrary times inside the profile."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.clip(np.floor(t / self.dt + 1e-9).astype(int), 0, len(self.omega) - 1)
        tau = np.clip(t - k * self.dt, 0.0, self.dt)
        s = self.x[k]
        w = self.omega[k]
        a = self.accel[k]
        th = s[:, 2] + w * tau
        c, si = np.cos(s[:, 2]), np.sin(s[:, 2])
        x = s[:, 0] + s[:, 3] * tau + 0.5 * c * a * tau**2
        y = s[:, 1] + s[:, 4] * tau + 0.5 * si * a * tau**2
        return np.column_stack([x, y, th])


def build_profile(traj: TrajectorySpec, rig: SensorRig) -> MotionProfile:
    tick, per_imu, _ = _tick(rig)
    dt = 1.0 / rig.imu_rate
    wps = np.asarray(traj.waypoints, dtype=float)
    omega: list[float] = []
    accel: list[float] = []

    def hold(n_ticks, w=0.0, a=0.0):
        omega.extend([w] * (n_ticks * per_imu))
        accel.extend([a] * (n_ticks * per_imu))

    heading = _initial_heading(traj, wps)
    start_heading = heading
    hold(int(round(traj.pause / tick)))
    for p, q in zip(wps[:-1], wps[1:]):
        d = q - p
        length = float(np.hypot(*d))
        if length == 0:
            continue
        turn = wrap_angle(math.atan2(d[1], d[0]) - heading)
        if turn != 0:
            n = math.ceil(abs(turn) / (traj.angular_speed * tick) - 1e-9)
            hold(n, turn / (n * tick))
            heading = heading + turn
        n_cruise = max(0, math.ceil(length / (traj.linear_speed * tick) - 1e-9) - 1)
        v = length / ((n_cruise + 1) * tick)
        hold(1, a=v / tick)
        hold(n_cruise)
        hold(1, a=-v / tick)
    hold(int(round(traj.pause / tick)))

    omega_a = np.array(omega)
    accel_a = np.array(accel)
    states = np.zeros((len(omega_a) + 1, 5))
    states[0] = (wps[0, 0], wps[0, 1], start_heading, 0.0, 0.0)
    for k in range(len(omega_a)):
        x, y, th, vx, vy = states[k]
        w, a = omega_a[k], accel_a[k]
        if w != 0.0:
            states[k + 1] = (x, y, th + w * dt, vx, vy)
        else:
            c, si = math.cos(th), math.sin(th)
            states[k + 1] = (
                x + vx * dt + 0.5 * c * a * dt * dt,
                y + vy * dt + 0.5 * si * a * dt * dt,
                th,
                vx + c * a * dt,
                vy + si * a * dt,
            )
    return MotionProfile(dt, omega_a, accel_a, states)


def _initial_heading(traj: TrajectorySpec, wps: np.ndarray) -> float:
    if traj.initial_heading is not None:
        return float(traj.initial_heading)
    for i in range(len(wps) - 1):
        d = wps[i + 1] - wps[i]
        if np.any(d != 0):
            return math.atan2(d[1], d[0])
    return 0.0


def _segments_cross(p, q, a, b) -> bool:
    def orient(o, u, v):
        return (u[0] - o[0]) * (v[1] - o[1]) - (u[1] - o[1]) * (v[0] - o[0])

    d1, d2 = orient(a, b, p), orient(a, b, q)
    d3, d4 = orient(p, q, a), orient(p, q, b)
    return (d1 * d2 <= 0) and (d3 * d4 <= 0)


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0, 1)
    return float(np.hypot(*(a + t * ab - p)))


def check_free(world: World, traj: TrajectorySpec, clearance: float = 0.2):
    wps = np.asarray(traj.waypoints, dtype=float)
    for p, q in zip(wps[:-1], wps[1:]):
        for w in world.walls:
            a, b = w[:2], w[2:]
            if _segments_cross(p, q, a, b):
                raise ValueError(f"trajectory leg {tuple(p)}->{tuple(q)} crosses a wall")
    for p in wps:
        for w in world.walls:
            if _point_segment_distance(p, w[:2], w[2:]) < clearance:
                raise ValueError(f"waypoint {tuple(p)} is closer than {clearance} m to a wall")


def simulate(world: World, traj: TrajectorySpec, rig: SensorRig = SensorRig(), seed: int = 0) -> Dataset:
    check_free(world, traj)
    prof = build_profile(traj, rig)
    rng = np.random.Generator(np.random.PCG64(seed))
    ns = rig.noise_scale
    dt = prof.dt
    K = len(prof.omega)
    imu_t = np.arange(K + 1) * dt

    # IMU: bias random walk plus white noise, in this draw order
    nz = rig.imu_noise
    walk = rng.standard_normal((K + 1, 3))
    white = rng.standard_normal((K + 1, 3))
    walk_sd = ns * np.array([nz.sigma_gyro_walk, nz.sigma_accel_walk, nz.sigma_accel_walk]) * math.sqrt(dt)
    bias = np.vstack([np.zeros(3), np.cumsum(walk[:-1] * walk_sd, axis=0)])
    white_sd = ns * np.array([nz.sigma_gyro, nz.sigma_accel, nz.sigma_accel]) / math.sqrt(dt)
    true_w = np.append(prof.omega, 0.0)
    true_a = np.append(prof.accel, 0.0)
    imu_w = true_w + bias[:, 0] + white[:, 0] * white_sd[0]
    imu_ax = true_a + bias[:, 1] + white[:, 1] * white_sd[1]
    imu_ay = bias[:, 2] + white[:, 2] * white_sd[2]

    # wheels: exact per-step displacements, slip over-reports travel
    ep = rig.encoder_params
    half_b = 0.5 * ep.wheel_base
    speed = np.hypot(prof.x[:-1, 3], prof.x[:-1, 4])
    fwd = speed * dt + 0.5 * prof.accel * dt * dt
    rot_step = prof.omega * dt
    dl = fwd - half_b * rot_step
    dr = fwd + half_b * rot_step
    scale = np.ones(K)
    for t0, t1, f in rig.slip_events:
        mid = imu_t[:-1] + 0.5 * dt
        scale[(mid >= t0) & (mid < t1)] = 1.0 / (1.0 - f)
    dl, dr = dl * scale, dr * scale

    _, per_imu, per_enc = _tick(rig)
    stride = per_imu / per_enc  # IMU steps per encoder sample
    enc_idx = np.arange(0, K + 1, stride).round().astype(int)
    enc_idx = enc_idx[enc_idx <= K]
    cum_l = np.concatenate([[0.0], np.cumsum(dl)])[enc_idx]
    cum_r = np.concatenate([[0.0], np.cumsum(dr)])[enc_idx]
    seg_path = 0.5 * (np.abs(np.diff(cum_l)) + np.abs(np.diff(cum_r)))
    enc_noise = rng.standard_normal((len(seg_path), 2))
    n_sum = ns * ep.sigma_d * np.sqrt(seg_path) * enc_noise[:, 0]
    n_diff = ns * ep.sigma_theta * np.sqrt(seg_path) * enc_noise[:, 1]
    cum_l = cum_l + np.concatenate([[0.0], np.cumsum(n_sum - half_b * n_diff)])
    cum_r = cum_r + np.concatenate([[0.0], np.cumsum(n_sum + half_b * n_diff)])
    ticks_l = np.rint(cum_l * ep.ticks_per_meter).astype(np.int64)
    ticks_r = np.rint(cum_r * ep.ticks_per_meter).astype(np.int64)
    enc_t = imu_t[enc_idx]

    # lidar sweeps end on multiples of the scan period
    period = 1.0 / rig.scan_rate
    n_scans = int(math.floor(prof.duration / period + 1e-9))
    angle_min, angle_inc = rig.beam_layout()
    angles = angle_min + angle_inc * np.arange(rig.beams)
    frac = np.arange(rig.beams) / max(rig.beams - 1, 1)
    range_noise = rng.standard_normal((n_scans, rig.beams))
    scans = []
    for s in range(n_scans):
        t_end = (s + 1) * period
        beam_t = t_end - period + frac * period
        poses = prof.pose_at(beam_t)
        r = raycast_many(world.walls, poses[:, :2], poses[:, 2] + angles, rig.range_max)
        valid = ~np.isnan(r)
        r = np.where(valid, r + ns * rig.sigma_range * range_noise[s], 0.0)
        r = np.where(valid, np.clip(r, 1e-3, rig.range_max), 0.0)
        scans.append((t_end, r))

    q = quantize
    records: list[tuple] = []
    for k in range(K + 1):
        t = q(imu_t[k])
        x, y, th = prof.x[k, :3]
        records.append((t, 0, GtRecord(t, q(x), q(y), q(wrap_angle(th)))))
        records.append((t, 1, ImuRecord(t, q(imu_w[k]), q(imu_ax[k]), q(imu_ay[k]))))
    for t, l, r in zip(enc_t, ticks_l, ticks_r):
        t = q(t)
        records.append((t, 2, EncRecord(t, int(l), int(r))))
    qa, qi = q(angle_min), q(angle_inc)
    for t_end, r in scans:
        t = q(t_end)
        records.append((t, 3, ScanRecord(t, qa, qi, tuple(q(v) for v in r))))
    records.sort(key=lambda rec: (rec[0], rec[1]))
    return Dataset([rec[2] for rec in records])


# --- ready-made scenarios --------------------------------------------------------------

L_CORRIDOR = (14.5, 21.0, 5.0)


def corridor_trajectory(a: float, b: float, c: float, speed: float = 0.5) -> TrajectorySpec:
    """Down the first leg, up the second, and most of the way back (~40 m)."""
    xc = a - c
    top = b - c - 1.0
    return TrajectorySpec(
        waypoints=[(0.0, 0.0), (xc, 0.0), (xc, top), (xc, 1.0)],
        linear_speed=speed,
        angular_speed=0.5,
    )


def default_slip_events() -> tuple:
    """Wheel-slip bursts as (t_start, t_end, factor) for the corridor run."""
    return ((8.0, 9.0, 0.5), (30.0, 31.5, 0.4), (55.0, 56.0, 0.5))
