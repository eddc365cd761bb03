"""Command-line entry point: simulate, run, eval and metrics.

Exit status is 0 on success, 1 for usage errors and 2 when input data is
missing, malformed or cannot be processed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .. import sim
from ..fusion import SingularSystemError
from ..mapping import (
    export_pgm,
    measure_map,
    metadata_text,
    read_map,
    read_measure_spec,
    write_measure_spec,
)
from .dataset import (
    DatasetError,
    Trajectory,
    fmt,
    looks_like_dataset,
    read_dataset,
    read_trajectory,
    write_dataset,
    write_trajectory,
)
from .evaluate import EvaluationError, evaluate
from .runner import MODES, RunConfig, parse_config, run_slam

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("lieslam")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems with status 2; we reserve 2 for data."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_scenario(text: str) -> tuple[sim.TrajectorySpec, dict]:
    """Read a scenario file into a trajectory and sensor-rig overrides.

    Lines (``#`` starts a comment)::

        waypoint <x> <y>         # at least two, in driving order
        speed <m/s>
        angular_speed <rad/s>
        pause <s>
        heading <rad>
        slip <t_start> <t_end> <factor>
        noise_scale <s>
        range_max <m>
    """
    waypoints, slips, traj_kw, rig_kw = [], [], {}, {}
    arity = {"waypoint": 2, "slip": 3, "speed": 1, "angular_speed": 1, "pause": 1,
             "heading": 1, "noise_scale": 1, "range_max": 1}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, *raw = line.split()
        if key not in arity:
            raise DatasetError(f"scenario line {lineno}: unknown key {key!r}")
        if len(raw) != arity[key]:
            raise DatasetError(f"scenario line {lineno}: {key} takes {arity[key]} value(s)")
        try:
            vals = [float(v) for v in raw]
        except ValueError:
            raise DatasetError(f"scenario line {lineno}: expected numbers") from None
        if key == "waypoint":
            waypoints.append(tuple(vals))
        elif key == "slip":
            slips.append(tuple(vals))
        elif key == "speed":
            traj_kw["linear_speed"] = vals[0]
        elif key == "heading":
            traj_kw["initial_heading"] = vals[0]
        elif key in ("angular_speed", "pause"):
            traj_kw[key] = vals[0]
        else:
            rig_kw[key] = vals[0]
    rig_kw["slip_events"] = tuple(slips)
    try:
        return sim.TrajectorySpec(waypoints=waypoints, **traj_kw), rig_kw
    except ValueError as exc:
        raise DatasetError(f"scenario: {exc}") from None


def _world_dims(text: str) -> tuple[float, float, float]:
    try:
        dims = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--world expects three numbers a,b,c, got {text!r}") from None
    if len(dims) != 3:
        raise UsageError(f"--world expects three numbers a,b,c, got {text!r}")
    return dims


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from None


def _write(path: str, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("ascii")
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc.strerror}") from None


def cmd_simulate(args) -> int:
    a, b, c = _world_dims(args.world)
    if args.traj:
        traj, rig_kw = parse_scenario(_read(args.traj).decode("ascii", "replace"))
    else:
        traj, rig_kw = sim.corridor_trajectory(a, b, c), {"slip_events": sim.default_slip_events()}
    try:
        world = sim.build_corridor_world(a, b, c)
        ds = sim.simulate(world, traj, sim.SensorRig(**rig_kw), seed=args.seed)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None
    _write(args.out, write_dataset(ds))
    if args.spec_out:
        _write(args.spec_out, write_measure_spec(sim.corridor_measure_spec(a, b, c)))
    return EXIT_OK


def cmd_run(args) -> int:
    ds = read_dataset(_read(args.dataset))
    try:
        cfg = parse_config(_read(args.config).decode("ascii", "replace")) if args.config else RunConfig()
        if args.mode:
            cfg = replace(cfg, mode=args.mode)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None
    result = run_slam(ds, cfg)
    _write(args.traj_out, write_trajectory(result.trajectory))
    if args.map_out:
        _write(args.map_out + ".pgm", export_pgm(result.grid))
        _write(args.map_out + ".meta", metadata_text(result.grid))
    d = result.diagnostics
    log.info(
        "keyframes %d, lidar factors %d (rejected %d), encoder factors %d (excluded %d)",
        len(d.keyframe_times), d.lidar_inserted, d.lidar_rejected, d.encoder_inserted, d.encoder_excluded,
    )
    return EXIT_OK


def _load_trajectory(path: str) -> Trajectory:
    data = _read(path)
    if looks_like_dataset(data):
        traj = Trajectory.from_dataset(read_dataset(data))
        if not len(traj):
            raise DatasetError(f"{path} has no ground-truth records")
        return traj
    return read_trajectory(data)


def cmd_eval(args) -> int:
    report = evaluate(_load_trajectory(args.est), _load_trajectory(args.gt))
    _write(args.report, report.summary())
    if args.errors:
        _write(args.errors, report.errors_csv())
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        grid = read_map(_read(args.map + ".pgm"), _read(args.map + ".meta").decode("ascii", "replace"))
        spec = read_measure_spec(_read(args.spec).decode("ascii", "replace"))
    except ValueError as exc:
        raise DatasetError(str(exc)) from None
    m = measure_map(grid, spec)
    lines = [f"{name} {fmt(getattr(m, name))}\n" for name in ("a", "b", "c", "alpha")]
    _write(args.report, "".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lieslam", description="Planar lidar/IMU/encoder factor-graph SLAM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="synthesize a dataset in an L-shaped corridor")
    s.add_argument("--world", required=True, metavar="A,B,C", help="corridor dimensions in meters")
    s.add_argument("--traj", metavar="FILE", help="scenario file (default: the built-in corridor loop)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, metavar="FILE")
    s.add_argument("--spec-out", metavar="FILE", help="also write the matching map measurement spec")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run SLAM over a dataset")
    r.add_argument("--dataset", required=True, metavar="FILE")
    r.add_argument("--config", metavar="FILE", help="flat 'key value' overrides")
    r.add_argument("--mode", choices=MODES, help="overrides the config file's mode")
    r.add_argument("--traj-out", required=True, metavar="FILE")
    r.add_argument("--map-out", metavar="PREFIX", help="writes PREFIX.pgm and PREFIX.meta")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="RMSE of an estimate against ground truth")
    e.add_argument("--est", required=True, metavar="FILE")
    e.add_argument("--gt", required=True, metavar="FILE", help="trajectory or dataset with GT records")
    e.add_argument("--report", required=True, metavar="FILE")
    e.add_argument("--errors", metavar="FILE", help="per-pose error series as CSV")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="measure corridor dimensions on an exported map")
    m.add_argument("--map", required=True, metavar="PREFIX")
    m.add_argument("--spec", required=True, metavar="FILE")
    m.add_argument("--report", required=True, metavar="FILE")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("lieslam: a subcommand is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lieslam: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, EvaluationError, SingularSystemError, ValueError) as exc:
        print(f"lieslam {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
