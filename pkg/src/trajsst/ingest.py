"""Porto taxi CSV ingestion, synthetic trajectories, splits and dataset files.

Grid dataset file (little-endian)::

    b"TGRD" | version u32 = 1 | M u32 | encoder tag u8 (0 binary, 1 linear, 2 quadratic)
    3 sections (train, validation, test), each:
        count u64, then count records of [M*M float32 grid, row-major | target m f32 | target n f32]

Sequence dataset file, consumed by the LSTM baseline::

    b"TSEQ" | version u32 = 1 | M u32
    3 sections, each: count u64, then count records of
        [length u32 | length x (m u32, n u32) | target m f32 | target n f32]
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .errors import (
    BadMagicError,
    DomainError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .geo import (
    ENCODERS,
    PORTO_BBOX,
    BoundingBox,
    CellIndex,
    GpsPoint,
    Sample,
    Trajectory,
    TrajectoryGrid,
    encode,
    trajectory_to_cells,
)

log = logging.getLogger(__name__)

GRID_MAGIC = b"TGRD"
SEQ_MAGIC = b"TSEQ"
FORMAT_VERSION = 1
ENCODER_TAGS = {name: i for i, name in enumerate(ENCODERS)}
SECTIONS = ("train", "validation", "test")


# ---------------------------------------------------------------------------
# CSV parsing and filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawTripRecord:
    trip_id: str
    polyline: tuple[tuple[float, float], ...]


@dataclass
class ParseStats:
    rows: int = 0
    malformed: int = 0
    malformed_rows: list[int] = field(default_factory=list)


def _parse_polyline(text: str) -> tuple[tuple[float, float], ...]:
    data = json.loads(text)
    if not isinstance(data, list):
        raise ValueError("POLYLINE is not a list")
    out = []
    for pair in data:
        if not isinstance(pair, list) or len(pair) != 2:
            raise ValueError(f"bad coordinate pair {pair!r}")
        lon, lat = float(pair[0]), float(pair[1])
        if not (math.isfinite(lon) and math.isfinite(lat)):
            raise ValueError("non-finite coordinate")
        out.append((lon, lat))
    return tuple(out)


def parse_trip_csv(stream: TextIO, stats: ParseStats | None = None) -> Iterator[RawTripRecord]:
    """Yield one record per data row; malformed rows are skipped and counted.

    Row numbers in ``stats.malformed_rows`` are 1-based file lines with the
    header on line 1.
    """
    stats = stats if stats is not None else ParseStats()
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty CSV: header row missing") from None
    header = [h.strip().strip('"') for h in header]
    if "POLYLINE" not in header:
        raise FormatError(f"CSV header has no POLYLINE column: {header}")
    poly_col = header.index("POLYLINE")
    id_col = header.index("TRIP_ID") if "TRIP_ID" in header else None
    for lineno, row in enumerate(reader, start=2):
        stats.rows += 1
        try:
            polyline = _parse_polyline(row[poly_col])
        except (IndexError, ValueError, TypeError) as exc:
            stats.malformed += 1
            stats.malformed_rows.append(lineno)
            log.warning("row %d skipped: %s", lineno, exc)
            continue
        trip_id = row[id_col] if id_col is not None and id_col < len(row) else str(lineno)
        yield RawTripRecord(trip_id, polyline)


def filter_bbox(records: Iterable[RawTripRecord], bbox: BoundingBox = PORTO_BBOX) -> list[RawTripRecord]:
    """Keep records with at least 2 points, all inside ``bbox``."""
    return [
        r for r in records
        if len(r.polyline) >= 2 and all(bbox.contains(lon, lat) for lon, lat in r.polyline)
    ]


def sample_trajectories(records: Sequence, count: int, seed: int) -> list:
    """Uniform sample without replacement, original order preserved."""
    n = len(records)
    if count >= n:
        if count > n:
            log.warning("requested %d trajectories but only %d available; taking all", count, n)
        return list(records)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=count, replace=False))
    return [records[i] for i in keep]


def record_to_trajectory(r: RawTripRecord) -> Trajectory:
    return Trajectory.from_pairs(r.polyline)


# ---------------------------------------------------------------------------
# synthetic trajectories
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    count: int = 5000
    resolution: int = 40
    min_length: int = 10
    max_length: int = 60
    step_mean: float = 0.02
    step_sd: float = 0.005
    turn_sd: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise DomainError("count must be >= 0")
        if self.min_length < 2 or self.max_length < self.min_length:
            raise DomainError("need 2 <= min_length <= max_length")
        if self.resolution < 1 or self.step_mean <= 0 or self.step_sd <= 0 or self.turn_sd <= 0:
            raise DomainError("resolution and step/turn parameters must be positive")


def _walk(rng: np.random.Generator, length: int, cfg: SyntheticConfig) -> np.ndarray:
    pos = rng.uniform(0.1, 0.9, size=2)
    heading = rng.uniform(0.0, 2 * np.pi)
    out = np.empty((length, 2))
    out[0] = pos
    for k in range(1, length):
        heading += rng.normal(0.0, cfg.turn_sd)
        step = max(cfg.step_mean + rng.normal(0.0, cfg.step_sd), 1e-4)
        pos = pos + step * np.array([np.cos(heading), np.sin(heading)])
        # reflect off the unit square walls
        for axis in range(2):
            if pos[axis] < 0.0 or pos[axis] > 1.0:
                pos[axis] = -pos[axis] if pos[axis] < 0.0 else 2.0 - pos[axis]
                heading = np.pi - heading if axis == 0 else -heading
        pos = np.clip(pos, 0.0, 1.0)
        out[k] = pos
    return out


def generate_synthetic(cfg: SyntheticConfig, bbox: BoundingBox = PORTO_BBOX) -> list[Trajectory]:
    """Persistent random walks in the unit square, mapped into ``bbox``."""
    rng = np.random.default_rng(cfg.seed)
    out = []
    for _ in range(cfg.count):
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        uv = _walk(rng, length, cfg)
        lon = np.clip(bbox.lon_min + uv[:, 0] * (bbox.lon_max - bbox.lon_min), bbox.lon_min, bbox.lon_max)
        lat = np.clip(bbox.lat_min + uv[:, 1] * (bbox.lat_max - bbox.lat_min), bbox.lat_min, bbox.lat_max)
        out.append(Trajectory(tuple(GpsPoint(float(a), float(b)) for a, b in zip(lon, lat))))
    return out


# ---------------------------------------------------------------------------
# in-memory datasets
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SampleSet:
    """Samples stored column-wise.

    ``grids`` is [n, M, M] float32 for grid datasets; ``sequences`` holds the
    input-prefix cells ([L, 2] integer arrays) for sequence datasets.
    """

    targets: np.ndarray
    grids: np.ndarray | None = None
    sequences: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.targets)

    def __iter__(self) -> Iterator[Sample]:
        if self.grids is None:
            raise TypeError("only grid datasets iterate as Samples")
        m = self.grids.shape[-1]
        for g, t in zip(self.grids, self.targets):
            yield Sample(TrajectoryGrid(m, g), (float(t[0]), float(t[1])))

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index, dtype=np.int64)
        return SampleSet(
            targets=self.targets[index],
            grids=None if self.grids is None else self.grids[index],
            sequences=None if self.sequences is None else [self.sequences[i] for i in index],
        )

    def __eq__(self, other):
        if not isinstance(other, SampleSet):
            return NotImplemented
        if self.targets.tobytes() != other.targets.tobytes() or self.targets.shape != other.targets.shape:
            return False
        if (self.grids is None) != (other.grids is None):
            return False
        if self.grids is not None and (
            self.grids.shape != other.grids.shape or self.grids.tobytes() != other.grids.tobytes()
        ):
            return False
        if (self.sequences is None) != (other.sequences is None):
            return False
        if self.sequences is not None:
            if len(self.sequences) != len(other.sequences):
                return False
            return all(np.array_equal(a, b) for a, b in zip(self.sequences, other.sequences))
        return True

    @classmethod
    def empty(cls, resolution: int, kind: str = "grid") -> "SampleSet":
        targets = np.zeros((0, 2), dtype=np.float32)
        if kind == "grid":
            return cls(targets, grids=np.zeros((0, resolution, resolution), dtype=np.float32))
        return cls(targets, sequences=[])


@dataclass(eq=False)
class DatasetSplit:
    resolution: int
    encoder: str | None  # None for sequence datasets
    train: SampleSet
    validation: SampleSet
    test: SampleSet

    def sections(self) -> tuple[SampleSet, SampleSet, SampleSet]:
        return self.train, self.validation, self.test

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.encoder == other.encoder
            and all(a == b for a, b in zip(self.sections(), other.sections()))
        )


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded permutation cut 60/20/20; train takes the rounding remainder."""
    if n < 5:
        raise DomainError(f"need at least 5 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = n_test = n // 5
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split_dataset(samples: SampleSet, seed: int, resolution: int, encoder: str | None) -> DatasetSplit:
    tr, va, te = split_indices(len(samples), seed)
    return DatasetSplit(resolution, encoder, samples.subset(tr), samples.subset(va), samples.subset(te))


def build_datasets(
    trajectories: Sequence[Trajectory],
    bbox: BoundingBox = PORTO_BBOX,
    resolution: int = 40,
    seed: int = 0,
    encoders: Sequence[str] = ENCODERS,
) -> dict[str, DatasetSplit]:
    """Encode every trajectory once per encoder and split all of them alike.

    Returns one grid split per encoder plus a ``"sequence"`` split holding the
    input-prefix cells for the LSTM. Every split shares the same permutation,
    so sample i is the same trip in all of them.
    """
    if not trajectories:
        raise DomainError("no trajectories to build a dataset from")
    cell_lists = []
    targets = np.empty((len(trajectories), 2), dtype=np.float32)
    for i, t in enumerate(trajectories):
        if len(t) < 2:
            raise DomainError(f"trajectory {i} too short: {len(t)} point(s)")
        cells = trajectory_to_cells(t, bbox, resolution)
        cell_lists.append(cells)
        targets[i] = (cells[-1].m, cells[-1].n)
    out: dict[str, DatasetSplit] = {}
    for enc in encoders:
        grids = np.stack([encode(c[:-1], resolution, enc).values for c in cell_lists]).astype(np.float32)
        out[enc] = split_dataset(SampleSet(targets, grids=grids), seed, resolution, enc)
    seqs = [np.array([(c.m, c.n) for c in cells[:-1]], dtype=np.int64) for cells in cell_lists]
    out["sequence"] = split_dataset(SampleSet(targets, sequences=seqs), seed, resolution, None)
    return out


# ---------------------------------------------------------------------------
# binary dataset files
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"{r.what}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{r.what}: version {version}, expected {FORMAT_VERSION}")


def encode_grid_dataset(split: DatasetSplit) -> bytes:
    if split.encoder not in ENCODER_TAGS:
        raise FormatError(f"grid dataset needs an encoder, got {split.encoder!r}")
    m = split.resolution
    parts = [GRID_MAGIC, struct.pack("<IIB", FORMAT_VERSION, m, ENCODER_TAGS[split.encoder])]
    for section in split.sections():
        n = len(section)
        parts.append(struct.pack("<Q", n))
        if n:
            rec = np.empty((n, m * m + 2), dtype="<f4")
            rec[:, : m * m] = section.grids.reshape(n, m * m)
            rec[:, m * m :] = section.targets
            parts.append(rec.tobytes())
    return b"".join(parts)


def decode_grid_dataset(buf: bytes) -> DatasetSplit:
    r = _Reader(buf, "grid dataset")
    _check_header(r, GRID_MAGIC)
    m, tag = r.unpack("<IB")
    if tag >= len(ENCODERS):
        raise FormatError(f"grid dataset: unknown encoder tag {tag}")
    sections = []
    for _ in SECTIONS:
        (n,) = r.unpack("<Q")
        width = m * m + 2
        rec = np.frombuffer(r.take(4 * width * n), dtype="<f4").reshape(n, width)
        sections.append(SampleSet(
            targets=rec[:, m * m :].astype(np.float32),
            grids=rec[:, : m * m].reshape(n, m, m).astype(np.float32),
        ))
    return DatasetSplit(m, ENCODERS[tag], *sections)


def encode_sequence_dataset(split: DatasetSplit) -> bytes:
    parts = [SEQ_MAGIC, struct.pack("<II", FORMAT_VERSION, split.resolution)]
    for section in split.sections():
        parts.append(struct.pack("<Q", len(section)))
        for seq, target in zip(section.sequences, section.targets):
            parts.append(struct.pack("<I", len(seq)))
            parts.append(np.ascontiguousarray(seq, dtype="<u4").tobytes())
            parts.append(np.asarray(target, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_sequence_dataset(buf: bytes) -> DatasetSplit:
    r = _Reader(buf, "sequence dataset")
    _check_header(r, SEQ_MAGIC)
    (m,) = r.unpack("<I")
    sections = []
    for _ in SECTIONS:
        (n,) = r.unpack("<Q")
        seqs, targets = [], np.empty((n, 2), dtype=np.float32)
        for i in range(n):
            (length,) = r.unpack("<I")
            seqs.append(np.frombuffer(r.take(8 * length), dtype="<u4").reshape(length, 2).astype(np.int64))
            targets[i] = np.frombuffer(r.take(8), dtype="<f4")
        sections.append(SampleSet(targets=targets, sequences=seqs))
    return DatasetSplit(m, None, *sections)


def write_grid_dataset(split: DatasetSplit, path) -> None:
    Path(path).write_bytes(encode_grid_dataset(split))


def read_grid_dataset(path) -> DatasetSplit:
    return decode_grid_dataset(Path(path).read_bytes())


def write_sequence_dataset(split: DatasetSplit, path) -> None:
    Path(path).write_bytes(encode_sequence_dataset(split))


def read_sequence_dataset(path) -> DatasetSplit:
    return decode_sequence_dataset(Path(path).read_bytes())


def read_dataset(path) -> DatasetSplit:
    """Read either file kind, dispatching on the magic bytes."""
    buf = Path(path).read_bytes()
    if buf[:4] == SEQ_MAGIC:
        return decode_sequence_dataset(buf)
    return decode_grid_dataset(buf)


def grid_file_name(encoder: str) -> str:
    return f"grids_{encoder}.tgrd"


SEQUENCE_FILE_NAME = "sequences.tseq"


def write_dataset_dir(datasets: dict[str, DatasetSplit], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key, split in datasets.items():
        if key == "sequence":
            path = out / SEQUENCE_FILE_NAME
            write_sequence_dataset(split, path)
        else:
            path = out / grid_file_name(key)
            write_grid_dataset(split, path)
        written.append(path)
    return written
