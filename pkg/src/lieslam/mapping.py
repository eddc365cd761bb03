"""Log-odds occupancy grid, PGM export and wall-distance map metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import Pose2

L_HIT = math.log(0.7 / 0.3)  # +0.847
L_MISS = math.log(0.4 / 0.6)  # -0.405
L_CLAMP = 5.0

PIX_OCCUPIED, PIX_FREE, PIX_UNKNOWN = 0, 254, 205


@dataclass
class OccupancyGrid:
    """Log-odds grid; ``log_odds[row, col]`` with row 0 at ``origin[1]``."""

    resolution: float
    origin: tuple[float, float]
    width: int
    height: int
    log_odds: np.ndarray = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid dimensions must be positive")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        if self.log_odds is None:
            self.log_odds = np.zeros((self.height, self.width))
        elif self.log_odds.shape != (self.height, self.width):
            raise ValueError("log_odds shape does not match grid size")

    @classmethod
    def covering(cls, xmin, ymin, xmax, ymax, resolution=0.05) -> "OccupancyGrid":
        """Grid covering the box, with the origin snapped to the resolution lattice."""
        ox = math.floor(xmin / resolution) * resolution
        oy = math.floor(ymin / resolution) * resolution
        w = int(math.ceil((xmax - ox) / resolution)) + 1
        h = int(math.ceil((ymax - oy) / resolution)) + 1
        return cls(resolution, (ox, oy), w, h)

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        """Integer (col, row) indices of world points."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        return np.floor((xy - np.array(self.origin)) / self.resolution).astype(np.int64)

    def cell_centers(self, cols, rows) -> np.ndarray:
        return np.column_stack(
            [
                self.origin[0] + (np.asarray(cols) + 0.5) * self.resolution,
                self.origin[1] + (np.asarray(rows) + 0.5) * self.resolution,
            ]
        )

    def inside(self, cols, rows) -> np.ndarray:
        return (cols >= 0) & (cols < self.width) & (rows >= 0) & (rows < self.height)

    def probability(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.log_odds))

    def occupied_mask(self) -> np.ndarray:
        return self.probability() > 0.65

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.origin, self.width, self.height, self.log_odds.copy())


def _ray_cells(start: np.ndarray, ends: np.ndarray):
    """Integer line stepping from one start cell to many end cells.

    Returns (ray_id, step, col, row) for every cell strictly before each endpoint,
    excluding the start cell itself.
    """
    d = ends - start
    steps = np.max(np.abs(d), axis=1)
    counts = np.maximum(steps - 1, 0)
    ray = np.repeat(np.arange(len(ends)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    k = offs + 1
    n = steps[ray]
    # round-half-up of start + k*d/n using integer arithmetic
    col = start[0] + np.floor_divide(2 * k * d[ray, 0] + n, 2 * n)
    row = start[1] + np.floor_divide(2 * k * d[ray, 1] + n, 2 * n)
    return ray, k, col, row


def insert_scan(grid: OccupancyGrid, pose: Pose2, cloud) -> None:
    """Ray-trace a robot-frame cloud observed from ``pose`` into ``grid``.

    Each cell receives at most one update per scan; a hit wins over a miss.
    Rays leaving the grid are clipped at the boundary and record no hit.
    """
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return
    world = pose.transform_points(pts)
    start = grid.cell_of(pose.t)[0]
    ends = grid.cell_of(world)

    ray, _, col, row = _ray_cells(start, ends)
    inside = grid.inside(col, row)
    # clip each ray at its first out-of-grid cell
    outside_rays = np.unique(ray[~inside])
    if len(outside_rays):
        first_out = np.full(len(ends), np.iinfo(np.int64).max)
        idx = np.nonzero(~inside)[0]
        np.minimum.at(first_out, ray[idx], idx)
        keep = np.arange(len(ray)) < first_out[ray]
    else:
        keep = np.ones(len(ray), dtype=bool)
    keep &= inside

    update = np.zeros((grid.height, grid.width), dtype=np.int8)
    update[row[keep], col[keep]] = -1

    end_in = grid.inside(ends[:, 0], ends[:, 1])
    start_in = bool(grid.inside(start[0], start[1]))
    # an endpoint is only a hit if its whole ray stayed inside the grid
    ok_rays = np.ones(len(ends), dtype=bool)
    ok_rays[outside_rays] = False
    hit = end_in & ok_rays & start_in
    update[ends[hit, 1], ends[hit, 0]] = 1

    lo = grid.log_odds
    lo[update == -1] += L_MISS
    lo[update == 1] += L_HIT
    np.clip(lo, -L_CLAMP, L_CLAMP, out=lo)


def export_pgm(grid: OccupancyGrid) -> bytes:
    p = grid.probability()
    img = np.full(p.shape, PIX_UNKNOWN, dtype=np.uint8)
    img[p > 0.65] = PIX_OCCUPIED
    img[p < 0.25] = PIX_FREE
    img = np.flipud(img)
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    return header + img.tobytes()


def metadata_text(grid: OccupancyGrid) -> str:
    return (
        f"resolution {grid.resolution:.9f}\n"
        f"origin {grid.origin[0]:.9f} {grid.origin[1]:.9f}\n"
    )


def read_map(pgm: bytes, meta: str) -> OccupancyGrid:
    """Rebuild a tri-level grid from exported PGM bytes and its metadata."""
    parts = pgm.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not a binary P5 map with maxval 255")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError("PGM payload size does not match header")
    img = np.flipud(data.reshape(h, w))
    res, origin = None, None
    for line in meta.splitlines():
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "resolution":
            res = float(tok[1])
        elif tok[0] == "origin":
            origin = (float(tok[1]), float(tok[2]))
    if res is None or origin is None:
        raise ValueError("map metadata needs resolution and origin lines")
    lo = np.zeros((h, w))
    lo[img == PIX_OCCUPIED] = L_CLAMP
    lo[img == PIX_FREE] = -L_CLAMP
    return OccupancyGrid(res, origin, w, h, lo)


# --- map metrics -------------------------------------------------------------------

Rect = tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


@dataclass(frozen=True)
class MapMetrics:
    a: float
    b: float
    c: float
    alpha: float


@dataclass(frozen=True)
class MeasureSpec:
    """Per metric, two regions selecting the wall cells that define it."""

    regions: Mapping[str, tuple[Rect, Rect]] = field(default_factory=dict)

    def __post_init__(self):
        for name, pair in self.regions.items():
            if len(pair) != 2:
                raise ValueError(f"metric {name} needs exactly two regions")
            for xmin, ymin, xmax, ymax in pair:
                if not (xmax > xmin and ymax > ymin):
                    raise ValueError(f"empty region for metric {name}")


class MeasureError(ValueError):
    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        super().__init__("; ".join(f"{k}: {v}" for k, v in failures.items()))


@dataclass(frozen=True)
class FittedLine:
    centroid: np.ndarray
    direction: np.ndarray

    def distance(self, p: np.ndarray) -> float:
        d = np.asarray(p) - self.centroid
        return abs(d[0] * self.direction[1] - d[1] * self.direction[0])


MIN_REGION_CELLS = 20


def fit_line(points: np.ndarray) -> FittedLine:
    """Total-least-squares line through ``points``."""
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    return FittedLine(c, vt[0])


def region_points(grid: OccupancyGrid, rect: Rect) -> np.ndarray:
    rows, cols = np.nonzero(grid.occupied_mask())
    centers = grid.cell_centers(cols, rows)
    xmin, ymin, xmax, ymax = rect
    sel = (
        (centers[:, 0] >= xmin)
        & (centers[:, 0] <= xmax)
        & (centers[:, 1] >= ymin)
        & (centers[:, 1] <= ymax)
    )
    return centers[sel]


def line_gap(l1: FittedLine, l2: FittedLine) -> float:
    """Mean of the two mutual centroid-to-line distances."""
    return 0.5 * (l1.distance(l2.centroid) + l2.distance(l1.centroid))


def corner_angle(l1: FittedLine, l2: FittedLine) -> float:
    """Angle in degrees between two lines, each oriented from their intersection
    toward the region it was fitted to."""
    d1, d2 = l1.direction, l2.direction
    A = np.column_stack([d1, -d2])
    if abs(np.linalg.det(A)) < 1e-12:
        return 0.0
    s, _ = np.linalg.solve(A, l2.centroid - l1.centroid)
    corner = l1.centroid + s * d1
    u1 = l1.centroid - corner
    u2 = l2.centroid - corner
    u1 = d1 * np.sign(u1 @ d1 or 1.0)
    u2 = d2 * np.sign(u2 @ d2 or 1.0)
    return math.degrees(math.acos(float(np.clip(u1 @ u2, -1.0, 1.0))))


def measure_map(grid: OccupancyGrid, spec: MeasureSpec) -> MapMetrics:
    values: dict[str, float] = {}
    failures: dict[str, str] = {}
    for name in ("a", "b", "c", "alpha"):
        if name not in spec.regions:
            failures[name] = "no regions configured"
            continue
        lines = []
        for rect in spec.regions[name]:
            pts = region_points(grid, rect)
            if len(pts) < MIN_REGION_CELLS:
                failures[name] = f"region {rect} holds {len(pts)} occupied cells (< {MIN_REGION_CELLS})"
                break
            lines.append(fit_line(pts))
        if name in failures:
            continue
        if name == "alpha":
            values[name] = corner_angle(*lines)
        else:
            values[name] = line_gap(*lines)
    if failures:
        raise MeasureError(failures)
    return MapMetrics(**values)


def read_measure_spec(text: str) -> MeasureSpec:
    """Parse ``<metric> xmin ymin xmax ymax xmin ymin xmax ymax`` lines."""
    regions = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 9:
            raise ValueError(f"line {lineno}: expected a metric name and 8 numbers")
        v = [float(t) for t in tok[1:]]
        regions[tok[0]] = (tuple(v[:4]), tuple(v[4:]))
    return MeasureSpec(regions)


def write_measure_spec(spec: MeasureSpec) -> str:
    out = []
    for name, (r1, r2) in spec.regions.items():
        out.append(" ".join([name, *(f"{v:.9f}" for v in (*r1, *r2))]))
    return "\n".join(out) + "\n"
