import hashlib
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lieslam.encoder import EncoderParams
from lieslam.fusion import FactorKind
from lieslam.mapping import export_pgm
from lieslam.pipeline import (
    Dataset,
    DatasetError,
    EvaluationError,
    GtRecord,
    ImuRecord,
    RunConfig,
    ScanRecord,
    Trajectory,
    evaluate,
    parse_config,
    read_dataset,
    read_trajectory,
    run_slam,
    write_dataset,
    write_trajectory,
)
from lieslam.sim import SensorRig, TrajectorySpec, build_straight_corridor, simulate

FINE = EncoderParams(ticks_per_meter=1e9)
EXACT = SensorRig(noise_scale=0.0, encoder_params=FINE)

# frozen outputs of the small seeded run below, produced once by this implementation
GOLDEN_DATASET = "365db02b6ab6ff275b90f93dd7fb0991b4f0fc520539eb34d6508b59180dc6e5"
GOLDEN_PGM = "26abf1c77ec8e9569d655f52223cf35c0b14334573262e859b5433dbe201dd3a"
GOLDEN_TRAJ = "dcddc392eecb4fe279da350dd78fc8aa78008931a726513c4d364faf419f2891"


def sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


@pytest.fixture(scope="module")
def small_run():
    ds = simulate(build_straight_corridor(10.0, 3.0, 2.0), TrajectorySpec([(0, 0), (4, 0), (4, 1)]), SensorRig(), seed=42)
    return ds, run_slam(ds)


class TestDatasetFormat:
    def test_empty(self):
        assert len(read_dataset(b"")) == 0
        assert write_dataset(Dataset()) == b""

    def test_single_imu_line(self):
        ds = read_dataset(b"IMU 0.010000000 0.100000000 0.500000000 0.000000000\n")
        assert ds.records == [ImuRecord(0.01, 0.1, 0.5, 0.0)]

    def test_canonical_round_trip(self):
        text = (
            b"GT 0.000000000 0.000000000 0.000000000 0.000000000\n"
            b"IMU 0.000000000 -0.100000000 0.500000000 0.000000000\n"
            b"ENC 0.000000000 12 -3\n"
            b"SCAN 0.100000000 3 -1.000000000 1.000000000 1.500000000 0.000000000 2.250000000\n"
        )
        assert write_dataset(read_dataset(text)) == text

    def test_simulated_round_trip(self, small_run):
        ds, _ = small_run
        data = write_dataset(ds)
        back = read_dataset(data)
        assert back == ds
        assert write_dataset(back) == data

    @pytest.mark.parametrize(
        "text,line",
        [
            (b"IMU 0.0 1 2\n", 1),
            (b"IMU 0.0 0 0 0\nFOO 1 2\n", 2),
            (b"IMU 0.0 0 0 0\nSCAN 0.1 3 0 0.1 1 2\n", 2),
            (b"ENC 0.1 1.5 2\n", 1),
            (b"GT 0.0 x 0 0\n", 1),
        ],
    )
    def test_malformed_lines_report_number(self, text, line):
        with pytest.raises(DatasetError, match=f"line {line}"):
            read_dataset(text)

    def test_timestamp_regression(self):
        with pytest.raises(DatasetError, match="line 2"):
            read_dataset(b"IMU 0.2 0 0 0\nENC 0.1 0 0\n")

    def test_per_stream_strictly_increasing(self):
        with pytest.raises(DatasetError):
            read_dataset(b"IMU 0.1 0 0 0\nIMU 0.1 0 0 0\n")

    def test_scan_record_fields(self):
        ds = read_dataset(b"SCAN 0.100000000 2 -1.000000000 0.500000000 1.000000000 2.000000000\n")
        (s,) = ds.scans
        assert isinstance(s, ScanRecord) and s.n == 2 and s.ranges == (1.0, 2.0)

    def test_trajectory_round_trip(self):
        tr = Trajectory([0.0, 0.1, 0.25], [[0, 0, 0], [0.1, -0.2, 3.0], [1, 2, -3.1]])
        data = write_trajectory(tr)
        assert data.splitlines()[1] == b"0.100000000 0.100000000 -0.200000000 3.000000000"
        back = read_trajectory(data)
        np.testing.assert_array_equal(back.poses, tr.poses)

    def test_trajectory_must_increase(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.0], np.zeros((2, 3)))
        with pytest.raises(DatasetError):
            read_trajectory("0 0 0 0\n0 1 1 1\n")


class TestEvaluate:
    def traj(self, poses, t=None):
        poses = np.asarray(poses, dtype=float)
        return Trajectory(np.arange(len(poses)) * 0.1 if t is None else t, poses)

    def test_identical(self):
        t = self.traj([[0, 0, 0], [1, 0, 0.5], [2, 1, 1.0]])
        e = evaluate(t, t)
        assert e.rmse_pos == 0 and e.rmse_ang == 0
        assert e.summary() == "rmse_pos 0.000000000\nrmse_ang 0.000000000\n"

    def test_constant_offset(self):
        a = self.traj([[0, 0, 0], [1, 0, 0.5], [2, 1, 1.0]])
        b = self.traj(a.poses + [1.0, 0, 0])
        e = evaluate(b, a)
        assert e.rmse_pos == pytest.approx(1.0) and e.rmse_ang == 0

    def test_hand_computed(self):
        a = self.traj([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        b = self.traj([[0.1, 0, 0], [1, 0.2, 0], [2 - 0.12, 0.16, 0]])
        assert evaluate(b, a).rmse_pos == pytest.approx(0.17320508, abs=1e-8)

    def test_angle_wraps_in_degrees(self):
        a = self.traj([[0, 0, math.pi - 0.01]])
        b = self.traj([[0, 0, -math.pi + 0.01]])
        assert evaluate(b, a).rmse_ang == pytest.approx(math.degrees(0.02))

    def test_nearest_stamp_within_window(self):
        gt = self.traj([[0, 0, 0], [1, 0, 0], [2, 0, 0]], t=[0.0, 1.0, 2.0])
        est = self.traj([[0, 0, 0], [1, 0, 0], [5, 0, 0]], t=[0.04, 0.97, 1.5])
        e = evaluate(est, gt)
        assert e.n_pairs == 2 and e.rmse_pos == 0

    def test_no_pairs(self):
        with pytest.raises(EvaluationError):
            evaluate(self.traj([[0, 0, 0]], t=[5.0]), self.traj([[0, 0, 0]], t=[0.0]))

    def test_errors_csv(self):
        a = self.traj([[0, 0, 0], [1, 0, 0]])
        csv = evaluate(self.traj(a.poses + [0, 0.5, 0]), a).errors_csv().splitlines()
        assert csv == ["t,err_pos,err_ang", "0.000000000,0.500000000,0.000000000", "0.100000000,0.500000000,0.000000000"]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a = self.traj(rng.normal(0, 2, (20, 3)))
        b = self.traj(rng.normal(0, 2, (20, 3)))
        ab, ba = evaluate(a, b), evaluate(b, a)
        assert ab.rmse_pos == pytest.approx(ba.rmse_pos, abs=1e-12)
        assert ab.rmse_ang == pytest.approx(ba.rmse_ang, abs=1e-12)
        assert ab.rmse_pos >= 0 and ab.rmse_ang >= 0


class TestConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.keyframe_distance, c.keyframe_angle, c.mode) == (0.2, 0.087, "fused")

    def test_parse(self):
        c = parse_config("# comment\nkeyframe_distance 0.3\nmode lidar_only\nlidar_kappa 5  # inline\nmax_iterations 20\nticks_per_meter 2000\n")
        assert c.keyframe_distance == 0.3 and c.mode == "lidar_only"
        assert c.lidar_weights.kappa == 5 and c.optimizer.max_iterations == 20
        assert c.encoder_params.ticks_per_meter == 2000

    @pytest.mark.parametrize("text", ["bogus 1\n", "tau_e\n", "tau_e abc\n", "tau_e -1\n", "mode both\n"])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_config(text)


class TestRunSlam:
    def test_no_scans(self):
        with pytest.raises(DatasetError):
            run_slam(read_dataset(b"IMU 0.0 0 0 0\nIMU 0.01 0 0 0\n"))

    def test_stationary(self):
        ds = simulate(build_straight_corridor(6.0, 3.0, 3.0), TrajectorySpec([(0, 0), (0, 0)], pause=2.0), EXACT, seed=0)
        traj, grid = run_slam(ds, RunConfig(encoder_params=FINE))
        assert len(traj) >= 2
        assert np.max(np.abs(traj.poses)) < 1e-6
        # the two side walls at y = +-1.5 show up as occupied rows
        rows, cols = np.nonzero(grid.occupied_mask())
        ys = grid.cell_centers(cols, rows)[:, 1]
        assert np.sum(np.abs(ys - 1.5) < 0.05) > 20 and np.sum(np.abs(ys + 1.5) < 0.05) > 20

    def test_straight_corridor_zero_noise(self):
        # long enough that neither end wall is in range: the lidar sees a featureless tube
        ds = simulate(build_straight_corridor(40.0, 3.0, 14.0), TrajectorySpec([(0, 0), (8, 0)]), EXACT, seed=0)
        res = run_slam(ds, RunConfig(encoder_params=FINE))
        t_end = res.trajectory.t[-1]
        assert t_end == ds.scans[-1].t
        gt = next(g for g in ds.ground_truth if g.t == t_end)
        x, y, _ = res.trajectory.poses[-1]
        assert math.hypot(x - gt.x, y - gt.y) < 1e-3

    def test_degradation_limits_lidar_factors(self):
        ds = simulate(build_straight_corridor(40.0, 3.0, 14.0), TrajectorySpec([(0, 0), (6, 0)]), SensorRig(), seed=42)
        res = run_slam(ds)
        d = res.diagnostics
        pairs = len(d.keyframe_times) - 1
        assert d.lidar_rejected > 0
        assert d.lidar_inserted < pairs
        assert res.graph.count(FactorKind.LIDAR) == d.lidar_inserted

    def test_deterministic(self, small_run):
        ds, res = small_run
        again = run_slam(ds)
        assert write_trajectory(again.trajectory) == write_trajectory(res.trajectory)
        assert export_pgm(again.grid) == export_pgm(res.grid)

    def test_golden_outputs(self, small_run):
        ds, res = small_run
        assert sha(write_dataset(ds)) == GOLDEN_DATASET
        assert sha(write_trajectory(res.trajectory)) == GOLDEN_TRAJ
        assert sha(export_pgm(res.grid)) == GOLDEN_PGM

    def test_modes_keep_imu_and_drop_the_other_sensor(self, small_run):
        ds, _ = small_run
        for mode, present, absent in [("lidar_only", FactorKind.LIDAR, FactorKind.ENCODER), ("encoder_only", FactorKind.ENCODER, FactorKind.LIDAR)]:
            g = run_slam(ds, RunConfig(mode=mode)).graph
            assert g.count(FactorKind.IMU) == len(g) - 1
            assert g.count(present) > 0 and g.count(absent) == 0

    def test_fused_is_superset_minus_exclusions(self):
        ds = simulate(build_straight_corridor(10.0, 3.0, 2.0), TrajectorySpec([(0, 0), (4, 0)]), EXACT, seed=0)

        def keys(graph, include_rejected=False):
            fs = graph.factors + (graph.rejected if include_rejected else [])
            return {(f.kind, f.endpoints) for f in fs}

        # 0.05 m of travel per scan; a keyframe gap between 4 and 5 scans keeps
        # the keyframe schedule identical across modes despite small estimate differences
        cfg = RunConfig(encoder_params=FINE, keyframe_distance=0.225)
        fused = run_slam(ds, cfg)
        for mode in ("lidar_only", "encoder_only"):
            single = run_slam(ds, replace(cfg, mode=mode))
            assert single.diagnostics.keyframe_times == fused.diagnostics.keyframe_times
            assert keys(single.graph) <= keys(fused.graph, include_rejected=True)
