"""Line-oriented text format for sensor logs and trajectories.

One record per line, space separated, LF endings, fixed 9-decimal floats::

    IMU  t wz ax ay
    SCAN t n angle_min angle_inc r_1 ... r_n
    ENC  t left right
    GT   t x y theta

Trajectory files hold ``t x y theta`` per line in the same number format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np


class DatasetError(ValueError):
    pass


def fmt(v: float) -> str:
    s = f"{v:.9f}"
    return "0.000000000" if s == "-0.000000000" else s


def quantize(v: float) -> float:
    """Round a value through the on-disk representation."""
    return float(fmt(v))


class ImuRecord(NamedTuple):
    t: float
    wz: float
    ax: float
    ay: float


class ScanRecord(NamedTuple):
    t: float
    angle_min: float
    angle_inc: float
    ranges: tuple

    @property
    def n(self) -> int:
        return len(self.ranges)


class EncRecord(NamedTuple):
    t: float
    left: int
    right: int


class GtRecord(NamedTuple):
    t: float
    x: float
    y: float
    theta: float


Record = Union[ImuRecord, ScanRecord, EncRecord, GtRecord]

_TAG = {ImuRecord: "IMU", ScanRecord: "SCAN", EncRecord: "ENC", GtRecord: "GT"}


@dataclass
class Dataset:
    records: list = field(default_factory=list)

    def of(self, kind) -> list:
        return [r for r in self.records if isinstance(r, kind)]

    @property
    def imu(self) -> list[ImuRecord]:
        return self.of(ImuRecord)

    @property
    def scans(self) -> list[ScanRecord]:
        return self.of(ScanRecord)

    @property
    def encoders(self) -> list[EncRecord]:
        return self.of(EncRecord)

    @property
    def ground_truth(self) -> list[GtRecord]:
        return self.of(GtRecord)

    def __len__(self):
        return len(self.records)


def _format_record(r: Record) -> str:
    if isinstance(r, ImuRecord):
        return f"IMU {fmt(r.t)} {fmt(r.wz)} {fmt(r.ax)} {fmt(r.ay)}"
    if isinstance(r, ScanRecord):
        head = f"SCAN {fmt(r.t)} {len(r.ranges)} {fmt(r.angle_min)} {fmt(r.angle_inc)}"
        return " ".join([head, *(fmt(v) for v in r.ranges)])
    if isinstance(r, EncRecord):
        return f"ENC {fmt(r.t)} {int(r.left)} {int(r.right)}"
    if isinstance(r, GtRecord):
        return f"GT {fmt(r.t)} {fmt(r.x)} {fmt(r.y)} {fmt(r.theta)}"
    raise TypeError(f"not a dataset record: {r!r}")


def write_dataset(ds: Dataset) -> bytes:
    return "".join(_format_record(r) + "\n" for r in ds.records).encode("ascii")


def _parse_line(lineno: int, line: str) -> Record:
    tok = line.split(" ")
    tag = tok[0]
    try:
        if tag == "IMU" and len(tok) == 5:
            return ImuRecord(*(float(v) for v in tok[1:]))
        if tag == "ENC" and len(tok) == 4:
            return EncRecord(float(tok[1]), int(tok[2]), int(tok[3]))
        if tag == "GT" and len(tok) == 5:
            return GtRecord(*(float(v) for v in tok[1:]))
        if tag == "SCAN" and len(tok) >= 5:
            n = int(tok[2])
            if len(tok) != 5 + n:
                raise DatasetError(f"line {lineno}: SCAN declares {n} ranges, has {len(tok) - 5}")
            return ScanRecord(
                float(tok[1]), float(tok[3]), float(tok[4]), tuple(float(v) for v in tok[5:])
            )
    except ValueError as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"line {lineno}: {exc}") from None
    raise DatasetError(f"line {lineno}: malformed record {line[:40]!r}")


def read_dataset(data: bytes | str) -> Dataset:
    text = data.decode("ascii") if isinstance(data, (bytes, bytearray)) else data
    records = []
    last_t = -np.inf
    last_by_kind: dict[type, float] = {}
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        rec = _parse_line(lineno, line)
        if not np.isfinite(rec.t) or rec.t < 0:
            raise DatasetError(f"line {lineno}: invalid timestamp {rec.t}")
        if rec.t < last_t:
            raise DatasetError(f"line {lineno}: timestamp {rec.t} goes back in time")
        prev = last_by_kind.get(type(rec))
        if prev is not None and rec.t <= prev:
            raise DatasetError(f"line {lineno}: {_TAG[type(rec)]} timestamps must strictly increase")
        last_t = rec.t
        last_by_kind[type(rec)] = rec.t
        records.append(rec)
    return Dataset(records)


# --- trajectories ------------------------------------------------------------------


@dataclass
class Trajectory:
    t: np.ndarray
    poses: np.ndarray  # (N, 3): x, y, theta

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        if len(self.t) != len(self.poses):
            raise ValueError("trajectory times and poses differ in length")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("trajectory timestamps must strictly increase")

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Trajectory":
        gt = ds.ground_truth
        return cls([g.t for g in gt], [(g.x, g.y, g.theta) for g in gt])


def write_trajectory(traj: Trajectory) -> bytes:
    lines = [
        f"{fmt(t)} {fmt(x)} {fmt(y)} {fmt(th)}\n" for t, (x, y, th) in zip(traj.t, traj.poses)
    ]
    return "".join(lines).encode("ascii")


def read_trajectory(data: bytes | str) -> Trajectory:
    text = data.decode("ascii") if isinstance(data, (bytes, bytearray)) else data
    ts, poses = [], []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 4:
            raise DatasetError(f"line {lineno}: expected 't x y theta'")
        try:
            vals = [float(v) for v in tok]
        except ValueError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
        if ts and vals[0] <= ts[-1]:
            raise DatasetError(f"line {lineno}: timestamps must strictly increase")
        ts.append(vals[0])
        poses.append(vals[1:])
    return Trajectory(ts, poses)


def looks_like_dataset(data: bytes) -> bool:
    head = data.lstrip()[:5]
    return any(head.startswith(tag.encode()) for tag in ("IMU", "SCAN", "ENC", "GT"))
