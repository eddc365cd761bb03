"""End-to-end SLAM loop over a recorded dataset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..core import Pose2, RobotState
from ..encoder import EncoderParams, EncoderSample, detect_slip, integrate_encoder
from ..fusion import (
    FactorGraph,
    OptimizerConfig,
    OptimizeStats,
    bias_walk_factor,
    encoder_factor,
    imu_factor,
    lidar_factor,
    optimize,
    prior_factor,
)
from ..imu import (
    ImuNoiseParams,
    PreintegratedImu,
    integrate_many,
    knots,
    predict,
    reset_with_bias,
    slice_pieces,
)
from ..lidar import (
    LaserScan,
    PointCloud2D,
    ScanMatchError,
    deskew,
    degradation_score,
    match_scans,
)
from ..mapping import OccupancyGrid, insert_scan
from ..weights import WeightParams, weight_from_deviation
from .dataset import Dataset, DatasetError, Trajectory

log = logging.getLogger(__name__)

MODES = ("fused", "lidar_only", "encoder_only")


@dataclass(frozen=True)
class RunConfig:
    keyframe_distance: float = 0.2
    keyframe_angle: float = 0.087
    eps_range: float = 0.05
    min_motion: float = 0.02
    tau_e: float = 0.05
    tau_theta: float = 0.02
    lidar_weights: WeightParams = field(default_factory=lambda: WeightParams(tau=0.0, kappa=20.0))
    encoder_weights: WeightParams = field(default_factory=lambda: WeightParams(tau=0.02, kappa=40.0))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mode: str = "fused"
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    encoder_params: EncoderParams = field(default_factory=EncoderParams)
    range_max: float = 12.0
    grid_resolution: float = 0.05
    bias_relin: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("keyframe_distance", "keyframe_angle", "eps_range", "min_motion", "tau_e", "tau_theta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# flat config-file keys -> (section, attribute)
_CONFIG_KEYS = {
    "lidar_tau": ("lidar_weights", "tau"),
    "lidar_kappa": ("lidar_weights", "kappa"),
    "lidar_w_min": ("lidar_weights", "w_min"),
    "encoder_tau": ("encoder_weights", "tau"),
    "encoder_kappa": ("encoder_weights", "kappa"),
    "encoder_w_min": ("encoder_weights", "w_min"),
    **{f.name: ("optimizer", f.name) for f in fields(OptimizerConfig)},
    **{f.name: ("imu_noise", f.name) for f in fields(ImuNoiseParams)},
    **{f.name: ("encoder_params", f.name) for f in fields(EncoderParams)},
}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read flat ``key value`` lines (``#`` starts a comment) over ``base``."""
    cfg = base or RunConfig()
    top = {f.name for f in fields(RunConfig)} - {
        "lidar_weights",
        "encoder_weights",
        "optimizer",
        "imu_noise",
        "encoder_params",
    }
    nested: dict[str, dict] = {}
    flat: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 2:
            raise ValueError(f"config line {lineno}: expected 'key value'")
        key, raw = tok
        if key == "mode":
            flat[key] = raw
            continue
        try:
            value = float(raw)
        except ValueError:
            raise ValueError(f"config line {lineno}: {raw!r} is not a number") from None
        if key in top:
            flat[key] = value
        elif key in _CONFIG_KEYS:
            section, attr = _CONFIG_KEYS[key]
            if attr == "max_iterations":
                value = int(value)
            nested.setdefault(section, {})[attr] = value
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    for section, values in nested.items():
        flat[section] = replace(getattr(cfg, section), **values)
    return replace(cfg, **flat)


@dataclass
class Keyframe:
    node: int
    t: float
    scan: LaserScan
    cloud: PointCloud2D


@dataclass
class Diagnostics:
    keyframe_times: list = field(default_factory=list)
    lidar_inserted: int = 0
    lidar_rejected: int = 0
    lidar_failed: int = 0
    encoder_inserted: int = 0
    encoder_excluded: int = 0
    # per keyframe pair: (t_i, t_j, report, moving)
    degradation: list = field(default_factory=list)
    slip: list = field(default_factory=list)
    encoder_weights: list = field(default_factory=list)
    optimizer_iterations: int = 0

    @property
    def moving_pairs(self) -> list:
        return [d for d in self.degradation if d[3]]

    @property
    def degraded_fraction(self) -> float:
        moving = self.moving_pairs
        if not moving:
            return 0.0
        return sum(1 for d in moving if d[2].degraded) / len(moving)


@dataclass
class RunResult:
    trajectory: Trajectory
    grid: OccupancyGrid
    diagnostics: Diagnostics
    graph: FactorGraph

    def __iter__(self):
        return iter((self.trajectory, self.grid))


def _scan_period(times: np.ndarray) -> float:
    if len(times) < 2:
        return 0.0
    return float(np.median(np.diff(times)))


def run_slam(dataset: Dataset, config: RunConfig | None = None) -> RunResult:
    config = config or RunConfig()
    scans = dataset.scans
    if not scans:
        raise DatasetError("dataset contains no scans")
    imu = dataset.imu
    if not imu:
        raise DatasetError("dataset contains no IMU samples")
    imu_t = np.array([r.t for r in imu])
    imu_v = np.array([(r.wz, r.ax, r.ay) for r in imu])
    enc = [EncoderSample(r.t, r.left, r.right) for r in dataset.encoders]
    enc_t = np.array([s.t for s in enc])
    use_lidar = config.mode in ("fused", "lidar_only")
    use_encoder = config.mode in ("fused", "encoder_only")
    fused = config.mode == "fused"
    noise = config.imu_noise

    period = _scan_period(np.array([s.t for s in scans]))
    graph = FactorGraph()
    diag = Diagnostics()
    stats = OptimizeStats()
    keyframes: list[Keyframe] = []

    def to_scan(rec) -> LaserScan:
        t_start = max(rec.t - period, float(imu_t[0]), 0.0)
        t_start = min(t_start, rec.t)
        return LaserScan(t_start, rec.t, rec.angle_min, rec.angle_inc, config.range_max, np.array(rec.ranges))

    def cloud_of(scan: LaserScan, state: RobotState) -> PointCloud2D:
        """Deskew ``scan`` given the state estimate at its end."""
        pieces = slice_pieces(imu_t, imu_v, scan.t_start, scan.t_end)
        pre = integrate_many(PreintegratedImu.empty(state.bias), pieces, noise)
        # step the end velocity back to the sweep start, in the start body frame
        r_start = Pose2(0.0, 0.0, state.pose.theta - pre.delta_r).rotation()
        v_body = r_start.T @ state.velocity - pre.delta_v
        return deskew(scan, pre, v_body, path=knots(pieces, state.bias))

    def encoder_covers(t0, t1) -> bool:
        return len(enc) > 0 and enc_t[0] <= t0 and t1 <= enc_t[-1]

    first = scans[0]
    scan0 = to_scan(first)
    state0 = RobotState()
    node0 = graph.add_state(first.t, state0)
    graph.add_factor(prior_factor(node0, state0))
    keyframes.append(Keyframe(node0, first.t, scan0, cloud_of(scan0, state0)))
    diag.keyframe_times.append(first.t)

    kf_state = state0
    imu_buffers: list = []  # (factor index, raw pieces) per IMU factor
    pieces: list = []
    active = PreintegratedImu.empty(kf_state.bias)
    t_last = first.t

    last = scans[-1]
    for rec in scans[1:]:
        new = slice_pieces(imu_t, imu_v, t_last, rec.t)
        active = integrate_many(active, new, noise)
        pieces.extend(new)
        t_last = rec.t
        pred = predict(kf_state, active)
        rel = kf_state.pose.between(pred.pose)
        small = math.hypot(rel.x, rel.y) < config.keyframe_distance and abs(rel.theta) < config.keyframe_angle
        # the final scan always closes the trajectory
        if small and rec is not last:
            continue

        prev = keyframes[-1]
        i = prev.node
        j = graph.add_state(rec.t, pred)
        graph.add_factor(imu_factor(i, j, active))
        imu_buffers.append((len(graph.factors) - 1, pieces))
        graph.add_factor(bias_walk_factor(i, j, active.dt_total, noise))

        odom = None
        if encoder_covers(prev.t, rec.t):
            odom = integrate_encoder(enc, prev.t, rec.t, config.encoder_params, times=enc_t)
        if use_encoder and odom is not None:
            if fused:
                slip = detect_slip(odom, rel, config.tau_e, config.tau_theta)
                # heading disagreement counted as the wheel travel it implies
                score = slip.discrepancy + 0.5 * config.encoder_params.wheel_base * slip.rotation_discrepancy
                w = weight_from_deviation(score, config.encoder_weights)
                diag.slip.append((prev.t, rec.t, slip))
                diag.encoder_weights.append(w)
                ok = graph.add_factor(encoder_factor(i, j, odom, slip, weight=w))
            else:
                ok = graph.add_factor(encoder_factor(i, j, odom))
            if ok:
                diag.encoder_inserted += 1
            else:
                diag.encoder_excluded += 1

        scan = to_scan(rec)
        cloud = cloud_of(scan, pred)
        if use_lidar:
            motion = math.hypot(odom.delta.x, odom.delta.y) if odom is not None else math.hypot(rel.x, rel.y)
            report = None
            if fused:
                report = degradation_score(
                    prev.scan,
                    scan,
                    motion,
                    config.eps_range,
                    config.min_motion,
                    config.lidar_weights,
                )
                diag.degradation.append((prev.t, rec.t, report, motion > config.min_motion))
            try:
                match = match_scans(prev.cloud, cloud, rel)
            except ScanMatchError as exc:
                log.debug("scan match %s -> %s failed: %s", prev.t, rec.t, exc)
                diag.lidar_failed += 1
            else:
                if graph.add_factor(lidar_factor(i, j, match, report)):
                    diag.lidar_inserted += 1
                else:
                    diag.lidar_rejected += 1

        optimize(graph, config.optimizer, stats)
        _refresh_imu_factors(graph, imu_buffers, noise, config.bias_relin)
        kf_state = graph.state(j)
        keyframes.append(Keyframe(j, rec.t, scan, cloud))
        diag.keyframe_times.append(rec.t)
        pieces = []
        active = PreintegratedImu.empty(kf_state.bias)

    diag.optimizer_iterations = stats.iterations
    values = graph.values
    traj = Trajectory([k.t for k in keyframes], values[:, :3])
    grid = build_map(keyframes, values, config.grid_resolution)
    return RunResult(traj, grid, diag, graph)


def _refresh_imu_factors(graph: FactorGraph, buffers, noise, threshold: float) -> int:
    """Reintegrate IMU factors whose start-node bias drifted from the one used."""
    values = graph.values
    count = 0
    for idx, raw in buffers:
        f = graph.factors[idx]
        bias = values[f.endpoints[0], 5:8]
        if np.max(np.abs(bias - f.measurement.bias_lin)) <= threshold:
            continue
        pre = reset_with_bias(f.measurement, raw, bias, noise)
        graph.replace_factor(idx, imu_factor(f.endpoints[0], f.endpoints[1], pre))
        count += 1
    return count


def build_map(keyframes, values: np.ndarray, resolution: float) -> OccupancyGrid:
    poses = [Pose2(*values[k.node, :3]) for k in keyframes]
    world = [p.transform_points(k.cloud.points) for p, k in zip(poses, keyframes)]
    pts = np.vstack(world + [values[:, :2]])
    lo = pts.min(axis=0) - resolution
    hi = pts.max(axis=0) + resolution
    grid = OccupancyGrid.covering(lo[0], lo[1], hi[0], hi[1], resolution)
    for p, k in zip(poses, keyframes):
        insert_scan(grid, p, k.cloud)
    return grid
