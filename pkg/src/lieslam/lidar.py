"""Laser scans: motion deskew, point-to-line ICP and corridor degradation scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import SKEW, Pose2, rot, wrap_angle
from .imu import PreintegratedImu
from .weights import WeightParams, weight_from_deviation

DEFAULT_WEIGHTS = WeightParams(tau=0.0, kappa=20.0, w_min=0.05)


class ScanMatchError(ValueError):
    """Raised when two clouds do not overlap enough to be aligned."""


@dataclass(frozen=True)
class LaserScan:
    t_start: float
    t_end: float
    angle_min: float
    angle_increment: float
    range_max: float
    ranges: np.ndarray

    def __post_init__(self):
        r = np.array(self.ranges, dtype=float)
        r.setflags(write=False)
        object.__setattr__(self, "ranges", r)
        if self.t_end < self.t_start:
            raise ValueError("scan ends before it starts")
        if not self.angle_increment > 0:
            raise ValueError("angle_increment must be positive")

    @property
    def n(self) -> int:
        return len(self.ranges)

    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(self.n)

    def valid(self) -> np.ndarray:
        r = self.ranges
        return np.isfinite(r) & (r > 0) & (r <= self.range_max)


@dataclass(frozen=True)
class PointCloud2D:
    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 2)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose2) -> "PointCloud2D":
        return PointCloud2D(pose.transform_points(self.points))


@dataclass(frozen=True)
class ScanMatchResult:
    relative_pose: Pose2
    information: np.ndarray  # ordered (theta, x, y)
    iterations: int
    converged: bool
    mean_residual: float
    cost_history: tuple = field(default=(), repr=False)
    n_correspondences: int = 0


@dataclass(frozen=True)
class DegradationReport:
    score: float
    degraded: bool
    weight: float


def scan_to_points(scan: LaserScan) -> np.ndarray:
    ok = scan.valid()
    a = scan.angles()[ok]
    r = scan.ranges[ok]
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def deskew(scan: LaserScan, pre: PreintegratedImu, velocity=(0.0, 0.0), path=None) -> PointCloud2D:
    """Express every beam in the robot frame at ``scan.t_end``.

    ``velocity`` is the body-frame velocity at ``t_start``; the preintegrated
    deltas alone do not carry the initial-velocity displacement. Beam poses are
    interpolated linearly in translation and heading, either straight across
    the sweep or, when ``path = (t, dtheta, dp)`` gives the preintegrated
    motion at intermediate instants (see ``imu.knots``), between those.
    """
    duration = scan.t_end - scan.t_start
    if abs(pre.dt_total - duration) > 1e-6:
        raise ValueError(
            f"preintegration spans {pre.dt_total} s, scan spans {duration} s"
        )
    ok = scan.valid()
    n = scan.n
    r = scan.ranges[ok]
    a = scan.angles()[ok]
    pts = np.column_stack([r * np.cos(a), r * np.sin(a)])
    if duration == 0 or n < 2:
        return PointCloud2D(pts)

    vel = np.asarray(velocity, dtype=float)
    trans = vel * pre.dt_total + pre.delta_p
    dth = pre.delta_r
    if dth == 0 and not trans.any():
        return PointCloud2D(pts)
    s = (np.arange(n) / (n - 1))[ok]
    if path is None:
        th_k = s * dth
        tx, ty = s * trans[0], s * trans[1]
    else:
        kt, kth, kp = (np.asarray(v, dtype=float) for v in path)
        if abs(kt[-1] - duration) > 1e-6:
            raise ValueError("deskew path does not span the scan")
        tau = s * duration
        th_k = np.interp(tau, kt, kth)
        tx = np.interp(tau, kt, kp[:, 0]) + vel[0] * tau
        ty = np.interp(tau, kt, kp[:, 1]) + vel[1] * tau
    # beam pose in the start frame, then into the end frame
    c, si = np.cos(th_k), np.sin(th_k)
    px = c * pts[:, 0] - si * pts[:, 1] + tx
    py = si * pts[:, 0] + c * pts[:, 1] + ty
    Rt = rot(dth).T
    out = (np.column_stack([px, py]) - trans) @ Rt.T
    return PointCloud2D(out)


class GridIndex:
    """Uniform-cell spatial hash for two-nearest-neighbour lookups."""

    _OFF = 1 << 20
    _SPAN = 1 << 21

    def __init__(self, points: np.ndarray, cell: float = 0.5):
        self.points = np.asarray(points, dtype=float)
        self.cell = cell
        ij = np.floor(self.points / cell).astype(np.int64)
        keys = self._key(ij[:, 0], ij[:, 1])
        order = np.argsort(keys, kind="stable")
        sk = keys[order]
        self.keys, starts, counts = np.unique(sk, return_index=True, return_counts=True)
        width = int(counts.max()) if len(counts) else 1
        table = np.full((len(self.keys), width), -1, dtype=np.int64)
        col = np.arange(len(sk)) - np.repeat(starts, counts)
        row = np.repeat(np.arange(len(self.keys)), counts)
        table[row, col] = order
        self.table = table

    def _key(self, i, j):
        return (i + self._OFF) * self._SPAN + (j + self._OFF)

    def two_nearest(self, q: np.ndarray):
        """Indices and distances of the two nearest points within the 3x3 cell block.

        Missing neighbours come back as index -1 and distance inf.
        """
        q = np.asarray(q, dtype=float)
        ij = np.floor(q / self.cell).astype(np.int64)
        cands = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                k = self._key(ij[:, 0] + di, ij[:, 1] + dj)
                pos = np.searchsorted(self.keys, k)
                pos = np.minimum(pos, len(self.keys) - 1)
                hit = self.keys[pos] == k
                rows = np.where(hit[:, None], self.table[pos], -1)
                cands.append(rows)
        cand = np.concatenate(cands, axis=1)
        pts = self.points[np.maximum(cand, 0)]
        d2 = np.sum((pts - q[:, None, :]) ** 2, axis=2)
        d2[cand < 0] = np.inf
        if cand.shape[1] < 2:
            pad = np.full((len(q), 2 - cand.shape[1]), np.inf)
            d2 = np.hstack([d2, pad])
            cand = np.hstack([cand, np.full(pad.shape, -1)])
        best = np.argpartition(d2, 1, axis=1)[:, :2]
        bd = np.take_along_axis(d2, best, axis=1)
        swap = bd[:, 1] < bd[:, 0]
        best[swap] = best[swap][:, ::-1]
        bd[swap] = bd[swap][:, ::-1]
        idx = np.take_along_axis(cand, best, axis=1)
        idx[~np.isfinite(bd)] = -1
        return idx[:, 0], np.sqrt(bd[:, 0]), idx[:, 1], np.sqrt(bd[:, 1])


PARTNER_RADIUS = 2.0


def _partners(ref: np.ndarray) -> np.ndarray:
    """Nearest other reference point for each reference point, -1 if none within reach."""
    d, idx = cKDTree(ref).query(ref, k=2, distance_upper_bound=PARTNER_RADIUS)
    return np.where(np.isfinite(d[:, 1]), idx[:, 1], -1)


def _correspond(index: GridIndex, ref: np.ndarray, moved: np.ndarray, max_dist: float, partner: np.ndarray):
    i1, d1, i2, _ = index.two_nearest(moved)
    # sparse stretches of wall: borrow the line through the nearest point and its own neighbour
    i2 = np.where((i1 >= 0) & (i2 < 0), partner[np.maximum(i1, 0)], i2)
    ok = (i1 >= 0) & (i2 >= 0) & (d1 <= max_dist)
    a = ref[np.maximum(i1, 0)]
    b = ref[np.maximum(i2, 0)]
    d = b - a
    length = np.hypot(d[:, 0], d[:, 1])
    ok &= length > 1e-9
    normal = np.column_stack([-d[:, 1], d[:, 0]]) / np.where(length > 1e-9, length, 1.0)[:, None]
    e = np.einsum("ij,ij->i", normal, moved - a)
    return ok, normal, e


def _objective(ok, e, gate):
    # unmatched points pay the gate cost so the objective is comparable across iterations
    return float(np.sum(e[ok] ** 2) + gate * gate * np.count_nonzero(~ok))


MIN_SIGMA = 0.005


def match_scans(
    reference: PointCloud2D,
    current: PointCloud2D,
    initial_guess: Pose2 = Pose2(),
    max_iterations: int = 30,
    tolerance: float = 1e-6,
    max_dist: float = 0.5,
    cell: float = 0.5,
) -> ScanMatchResult:
    """Point-to-line ICP.

    Returns the pose of the ``current`` frame expressed in the ``reference``
    frame, i.e. the transform that maps current points onto the reference.
    """
    ref = reference.points
    cur = current.points
    if len(ref) < 30 or len(cur) < 30:
        raise ScanMatchError("scan matching needs at least 30 points per cloud")
    index = GridIndex(ref, cell)
    partner = _partners(ref)
    x = np.array([initial_guess.theta, initial_guess.x, initial_guess.y])

    def evaluate(params):
        R = rot(params[0])
        moved = cur @ R.T + params[1:]
        ok, normal, e = _correspond(index, ref, moved, max_dist, partner)
        return moved, ok, normal, e

    moved, ok, normal, e = evaluate(x)
    if np.count_nonzero(ok) < 10:
        raise ScanMatchError("insufficient overlap between scans")
    cost = _objective(ok, e, max_dist)
    history = [cost]
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        R = rot(x[0])
        dq = cur[ok] @ (R @ SKEW).T
        n = normal[ok]
        J = np.column_stack([np.einsum("ij,ij->i", n, dq), n])
        H = J.T @ J
        g = J.T @ e[ok]
        step = -np.linalg.lstsq(H, g, rcond=1e-10)[0]

        accepted = False
        for _ in range(12):
            cand = x + step
            _, c_ok, c_normal, c_e = evaluate(cand)
            c_cost = _objective(c_ok, c_e, max_dist)
            if c_cost <= cost and np.count_nonzero(c_ok) >= 10:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            converged = float(np.linalg.norm(step)) < 1e-4
            break
        x = cand
        ok, normal, e, cost = c_ok, c_normal, c_e, c_cost
        history.append(cost)
        if float(np.linalg.norm(step)) < tolerance:
            converged = True
            break

    R = rot(x[0])
    dq = cur[ok] @ (R @ SKEW).T
    n = normal[ok]
    J = np.column_stack([np.einsum("ij,ij->i", n, dq), n])
    res = e[ok]
    var = max(float(np.mean(res**2)), MIN_SIGMA**2)
    info = J.T @ J / var
    info = 0.5 * (info + info.T)
    return ScanMatchResult(
        relative_pose=Pose2(x[1], x[2], wrap_angle(x[0])),
        information=info,
        iterations=it,
        converged=converged,
        mean_residual=float(np.mean(np.abs(res))),
        cost_history=tuple(history),
        n_correspondences=int(np.count_nonzero(ok)),
    )


def degradation_score(
    prev: LaserScan,
    cur: LaserScan,
    commanded_motion: float,
    eps_range: float = 0.05,
    min_motion: float = 0.02,
    weight_params: WeightParams = DEFAULT_WEIGHTS,
) -> DegradationReport:
    """Mean per-beam range change between consecutive scans.

    A small change while the robot is known to be moving means the geometry
    repeats itself and scan matching cannot be trusted.
    """
    if (
        prev.n != cur.n
        or not math.isclose(prev.angle_min, cur.angle_min, abs_tol=1e-12)
        or not math.isclose(prev.angle_increment, cur.angle_increment, abs_tol=1e-12)
    ):
        raise ValueError("scans do not share a beam layout")
    both = prev.valid() & cur.valid()
    if not both.any():
        raise ValueError("no beam is valid in both scans")
    score = float(np.mean(np.abs(cur.ranges[both] - prev.ranges[both])))
    moving = commanded_motion > min_motion
    degraded = moving and score < eps_range
    weight = weight_from_deviation(max(0.0, eps_range - score), weight_params) if moving else 1.0
    return DegradationReport(score, degraded, weight)
