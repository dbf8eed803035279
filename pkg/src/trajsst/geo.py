"""Rasterize GPS trajectories into M x M trajectory grids.

Three encodings are provided. ``binary`` marks visited cells with 1.
``linear`` stores k/N, where k is the 1-based position of the point inside
the trajectory and N its length. ``quadratic`` stores (k/N)**2. When a cell
is visited more than once the largest k is kept (last visit wins), so the
final cell of a sequence always carries 1.0 under every encoding.

Cell indices are 0-based; the row comes from latitude and the column from
longitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import DomainError

Encoder = Literal["binary", "linear", "quadratic"]
ENCODERS: tuple[str, ...] = ("binary", "linear", "quadratic")


@dataclass(frozen=True)
class GpsPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise DomainError(f"non-finite GPS point ({self.lon}, {self.lat})")


@dataclass(frozen=True)
class BoundingBox:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise DomainError(f"degenerate bounding box {self}")

    def contains(self, lon: float, lat: float) -> bool:
        return self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max


PORTO_BBOX = BoundingBox(lon_min=-8.7, lon_max=-8.6, lat_min=41.1, lat_max=41.2)


@dataclass(frozen=True)
class Trajectory:
    points: tuple[GpsPoint, ...]

    def __post_init__(self):
        if len(self.points) < 1:
            raise DomainError("a trajectory needs at least one point")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]]) -> "Trajectory":
        return cls(tuple(GpsPoint(float(lon), float(lat)) for lon, lat in pairs))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class CellIndex:
    m: int
    n: int


@dataclass(frozen=True, eq=False)
class TrajectoryGrid:
    resolution: int
    values: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, TrajectoryGrid):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class Sample:
    grid: TrajectoryGrid
    target: tuple[float, float]


def _unit(x: float, lo: float, hi: float) -> float:
    # Decimal on the shortest repr: GPS fixes are decimal strings, and binary
    # subtraction would push points on a cell boundary (e.g. -8.65) below it.
    d = Decimal(repr(x))
    a = Decimal(repr(lo))
    return float((d - a) / (Decimal(repr(hi)) - a))


def normalize_point(p: GpsPoint, bbox: BoundingBox = PORTO_BBOX) -> tuple[float, float]:
    """Min-max normalize a point against the fixed box bounds."""
    if not bbox.lon_min <= p.lon <= bbox.lon_max:
        raise DomainError(f"longitude {p.lon} outside [{bbox.lon_min}, {bbox.lon_max}]")
    if not bbox.lat_min <= p.lat <= bbox.lat_max:
        raise DomainError(f"latitude {p.lat} outside [{bbox.lat_min}, {bbox.lat_max}]")
    return _unit(p.lon, bbox.lon_min, bbox.lon_max), _unit(p.lat, bbox.lat_min, bbox.lat_max)


def point_to_cell(u: float, v: float, resolution: int) -> CellIndex:
    if resolution < 1:
        raise DomainError(f"resolution must be >= 1, got {resolution}")
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise DomainError(f"unit coordinates ({u}, {v}) outside [0, 1]")
    m = min(math.floor(v * resolution), resolution - 1)
    n = min(math.floor(u * resolution), resolution - 1)
    return CellIndex(m, n)


def trajectory_to_cells(
    t: Trajectory, bbox: BoundingBox = PORTO_BBOX, resolution: int = 40
) -> list[CellIndex]:
    return [point_to_cell(*normalize_point(p, bbox), resolution) for p in t.points]


def _cell_arrays(cells: Sequence[CellIndex], resolution: int) -> tuple[np.ndarray, np.ndarray]:
    if len(cells) == 0:
        raise DomainError("cannot encode an empty cell sequence")
    rows = np.fromiter((c.m for c in cells), dtype=np.int64, count=len(cells))
    cols = np.fromiter((c.n for c in cells), dtype=np.int64, count=len(cells))
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= resolution or cols.max() >= resolution:
        raise DomainError(f"cell index outside a {resolution}x{resolution} grid")
    return rows, cols


def encode_binary(cells: Sequence[CellIndex], resolution: int) -> TrajectoryGrid:
    rows, cols = _cell_arrays(cells, resolution)
    values = np.zeros((resolution, resolution), dtype=np.float64)
    values[rows, cols] = 1.0
    return TrajectoryGrid(resolution, values)


def _last_visit_fraction(cells: Sequence[CellIndex], resolution: int) -> np.ndarray:
    rows, cols = _cell_arrays(cells, resolution)
    n = len(cells)
    k = np.arange(1, n + 1, dtype=np.float64)
    values = np.zeros((resolution, resolution), dtype=np.float64)
    # k/N is increasing in k, so an elementwise max keeps the last visit
    np.maximum.at(values, (rows, cols), k / n)
    return values


def encode_linear(cells: Sequence[CellIndex], resolution: int) -> TrajectoryGrid:
    return TrajectoryGrid(resolution, _last_visit_fraction(cells, resolution))


def encode_quadratic(cells: Sequence[CellIndex], resolution: int) -> TrajectoryGrid:
    return TrajectoryGrid(resolution, _last_visit_fraction(cells, resolution) ** 2)


_ENCODE = {
    "binary": encode_binary,
    "linear": encode_linear,
    "quadratic": encode_quadratic,
}


def encode(cells: Sequence[CellIndex], resolution: int, encoder: str) -> TrajectoryGrid:
    try:
        fn = _ENCODE[encoder]
    except KeyError:
        raise DomainError(f"unknown encoder {encoder!r}; expected one of {ENCODERS}") from None
    return fn(cells, resolution)


def make_sample(
    t: Trajectory,
    bbox: BoundingBox = PORTO_BBOX,
    resolution: int = 40,
    encoder: str = "quadratic",
) -> Sample:
    """Encode points 1..N-1 as the input grid and use point N as the target.

    The prefix is normalized by its own length N-1 since the destination is
    withheld from the model.
    """
    if len(t) < 2:
        raise DomainError(f"trajectory too short: {len(t)} point(s), need at least 2")
    cells = trajectory_to_cells(t, bbox, resolution)
    grid = encode(cells[:-1], resolution, encoder)
    last = cells[-1]
    return Sample(grid=grid, target=(float(last.m), float(last.n)))
