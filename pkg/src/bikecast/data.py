"""Demand and embedding data pipeline.

Trip logs become an hourly (T, n) demand matrix; POI embedding vectors are
mean-pooled per region; regions without demand or without embedding coverage
are dropped; the surviving series is cut into sliding windows and z-scored
with statistics fit on the training rows only.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientDataError, ShapeError, ValidationError
from .graph import Region, RegionSet

logger = logging.getLogger(__name__)


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 / ISO 8601 timestamp to an aware UTC datetime.

    Python 3.10's fromisoformat rejects a trailing 'Z', so normalize it first.
    Naive timestamps are taken as UTC.
    """
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


@dataclass(frozen=True)
class TripRecord:
    """One trip start: a timestamp plus either coordinates or a region id."""

    start_time: str
    start_lat: float | None = None
    start_lon: float | None = None
    region_id: str | None = None

    def __post_init__(self):
        has_coords = self.start_lat is not None and self.start_lon is not None
        if (self.start_lat is None) != (self.start_lon is None):
            raise ValidationError("trip has only one of start_lat/start_lon")
        if has_coords == (self.region_id is not None):
            raise ValidationError(
                "trip must carry exactly one of (start_lat, start_lon) or region_id"
            )


def read_trips_csv(path: str) -> list[TripRecord]:
    """Read trips from CSV with columns start_time + (start_lat, start_lon) or region_id."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or [])
        if "start_time" not in cols:
            raise ValidationError(f"{path}: trips CSV needs a start_time column, got {sorted(cols)}")
        has_coords = {"start_lat", "start_lon"} <= cols
        has_region = "region_id" in cols
        if not (has_coords or has_region):
            raise ValidationError(
                f"{path}: trips CSV needs start_lat/start_lon or region_id columns"
            )
        trips = []
        for lineno, row in enumerate(reader, start=2):
            try:
                if has_coords and row.get("start_lat") not in (None, ""):
                    rec = TripRecord(
                        start_time=row["start_time"],
                        start_lat=float(row["start_lat"]),
                        start_lon=float(row["start_lon"]),
                    )
                else:
                    rid = row.get("region_id")
                    if not rid:
                        raise ValidationError("row has neither coordinates nor region_id")
                    rec = TripRecord(start_time=row["start_time"], region_id=rid)
            except (ValueError, TypeError) as exc:
                logger.warning("%s:%d: skipping malformed trip row (%s)", path, lineno, exc)
                continue
            trips.append(rec)
    return trips


def point_in_polygon(lat: float, lon: float, polygon: Sequence[tuple[float, float]]) -> bool:
    """Even-odd ray casting on (lat, lon) vertices; boundary points count as inside."""
    n = len(polygon)
    inside = False
    for i in range(n):
        lat1, lon1 = polygon[i]
        lat2, lon2 = polygon[(i + 1) % n]
        # on-edge check: collinear and within the segment's bounding box
        cross = (lat2 - lat1) * (lon - lon1) - (lon2 - lon1) * (lat - lat1)
        if cross == 0.0 and min(lat1, lat2) <= lat <= max(lat1, lat2) \
                and min(lon1, lon2) <= lon <= max(lon1, lon2):
            return True
        if (lat1 > lat) != (lat2 > lat):
            lon_cross = lon1 + (lat - lat1) * (lon2 - lon1) / (lat2 - lat1)
            if lon < lon_cross:
                inside = not inside
    return inside


def assign_region(lat: float, lon: float, regions: RegionSet) -> int | None:
    """Index of the first region whose polygon contains the point, else None.

    Regions without polygons never match by containment.
    """
    for i, region in enumerate(regions):
        if region.polygon is not None and point_in_polygon(lat, lon, region.polygon):
            return i
    return None


@dataclass
class DemandMatrix:
    """Hourly (or other fixed-bin) demand counts, time rows by region columns."""

    values: np.ndarray
    t0: datetime
    bin: timedelta
    region_order: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"demand values must be 2-d, got shape {self.values.shape}")
        if self.values.shape[1] != len(self.region_order):
            raise ShapeError(
                f"demand has {self.values.shape[1]} columns but {len(self.region_order)} region ids"
            )
        if self.values.shape[0] < 1:
            raise ValidationError("demand matrix needs at least one time row")
        if (self.values < 0).any():
            raise ValidationError("demand values must be non-negative")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass
class AggregateReport:
    counted: int = 0
    out_of_span: int = 0
    unassigned: int = 0
    skipped: int = 0

    @property
    def total(self) -> int:
        return self.counted + self.out_of_span + self.unassigned + self.skipped


def aggregate_demand(
    trips: Iterable[TripRecord],
    regions: RegionSet,
    t_start: datetime,
    t_end: datetime,
    bin: timedelta = timedelta(hours=1),
) -> tuple[DemandMatrix, AggregateReport]:
    """Count trip starts into fixed time bins per region.

    Trips outside [t_start, t_end), trips that land in no region, and trips
    with unparseable timestamps are tallied in the report rather than raising;
    every input trip lands in exactly one report bucket.
    """
    if t_start.tzinfo is None or t_end.tzinfo is None:
        raise ValidationError("t_start and t_end must be timezone-aware")
    if t_end <= t_start:
        raise ValidationError(f"t_end {t_end.isoformat()} is not after t_start {t_start.isoformat()}")
    if bin <= timedelta(0):
        raise ValidationError(f"bin must be a positive duration, got {bin}")
    span = t_end - t_start
    n_bins, remainder = divmod(span, bin)
    if remainder != timedelta(0):
        raise ValidationError(f"bin {bin} does not divide the span {span} evenly")
    values = np.zeros((n_bins, len(regions)), dtype=np.float64)
    report = AggregateReport()
    for trip in trips:
        try:
            ts = parse_timestamp(trip.start_time)
        except ValueError:
            logger.warning("skipping trip with unparseable timestamp %r", trip.start_time)
            report.skipped += 1
            continue
        if trip.region_id is not None:
            try:
                col = regions.index_of(trip.region_id)
            except ValidationError:
                report.unassigned += 1
                continue
        else:
            col = assign_region(trip.start_lat, trip.start_lon, regions)
            if col is None:
                report.unassigned += 1
                continue
        row = (ts - t_start) // bin
        if not 0 <= row < n_bins:
            report.out_of_span += 1
            continue
        values[row, col] += 1.0
        report.counted += 1
    demand = DemandMatrix(values=values, t0=t_start, bin=bin, region_order=regions.ids)
    return demand, report


@dataclass
class EmbeddingTable:
    """Per-region pooled embedding vectors plus how many POIs fed each row."""

    vectors: np.ndarray
    coverage: np.ndarray
    region_order: list[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.coverage = np.asarray(self.coverage, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.region_order):
            raise ShapeError(
                f"embedding table shape {self.vectors.shape} does not match "
                f"{len(self.region_order)} regions"
            )
        if self.coverage.shape != (self.vectors.shape[0],):
            raise ShapeError("coverage must be one count per region")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, ids: Sequence[str]) -> "EmbeddingTable":
        """Rows for the given region ids, in that order (matched by id)."""
        index = {rid: i for i, rid in enumerate(self.region_order)}
        missing = [rid for rid in ids if rid not in index]
        if missing:
            raise ValidationError(f"embedding table is missing regions: {missing[:5]}")
        sel = np.array([index[rid] for rid in ids], dtype=np.intp)
        return EmbeddingTable(
            vectors=self.vectors[sel].copy(),
            coverage=self.coverage[sel].copy(),
            region_order=list(ids),
        )


def pool_embeddings(
    poi_vectors: Sequence[tuple[float, float, np.ndarray]],
    regions: RegionSet,
) -> EmbeddingTable:
    """Mean-pool POI vectors into their containing regions.

    ``poi_vectors`` is (lat, lon, vector) per POI. All vectors must share one
    dimension; regions containing no POI get an all-zero row with coverage 0.
    """
    if not poi_vectors:
        raise ValidationError("pool_embeddings needs at least one POI vector")
    dim = len(np.asarray(poi_vectors[0][2]).reshape(-1))
    sums = np.zeros((len(regions), dim), dtype=np.float64)
    counts = np.zeros(len(regions), dtype=np.int64)
    for i, (lat, lon, vec) in enumerate(poi_vectors):
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if v.shape[0] != dim:
            raise ValidationError(f"POI {i} has embedding dimension {v.shape[0]}, expected {dim}")
        if not np.isfinite(v).all():
            raise ValidationError(f"POI {i} has a non-finite embedding")
        col = assign_region(lat, lon, regions)
        if col is None:
            continue
        sums[col] += v
        counts[col] += 1
    vectors = np.zeros_like(sums)
    covered = counts > 0
    vectors[covered] = sums[covered] / counts[covered, None]
    return EmbeddingTable(vectors=vectors, coverage=counts, region_order=regions.ids)


def filter_complete(
    demand: DemandMatrix,
    embeddings: EmbeddingTable | None,
    regions: RegionSet,
) -> tuple[DemandMatrix, EmbeddingTable | None, RegionSet]:
    """Drop regions with zero total demand or (when given) zero embedding coverage.

    All three inputs must already agree on region order; the outputs keep the
    survivors in their original relative order.
    """
    if demand.region_order != regions.ids:
        raise ValidationError("demand and regions disagree on region order")
    keep = demand.values.sum(axis=0) > 0
    if embeddings is not None:
        if embeddings.region_order != regions.ids:
            raise ValidationError("embeddings and regions disagree on region order")
        keep &= embeddings.coverage > 0
    if not keep.any():
        raise ValidationError("no regions survive the completeness filter")
    idx = np.flatnonzero(keep)
    kept_ids = [regions.ids[i] for i in idx]
    new_demand = DemandMatrix(
        values=demand.values[:, idx].copy(),
        t0=demand.t0,
        bin=demand.bin,
        region_order=kept_ids,
    )
    new_embeddings = None
    if embeddings is not None:
        new_embeddings = EmbeddingTable(
            vectors=embeddings.vectors[idx].copy(),
            coverage=embeddings.coverage[idx].copy(),
            region_order=kept_ids,
        )
    return new_demand, new_embeddings, regions.subset(kept_ids)


def save_dataset(path: str, demand: DemandMatrix, embeddings: EmbeddingTable | None = None) -> None:
    """Write a demand matrix (and optional pooled embedding table) to one file."""
    from .container import write_container

    arrays: list[tuple[str, np.ndarray]] = [("demand", demand.values)]
    meta = {
        "region_ids": demand.region_order,
        "t0": demand.t0.isoformat(),
        "bin_seconds": demand.bin.total_seconds(),
    }
    if embeddings is not None:
        if embeddings.region_order != demand.region_order:
            raise ValidationError("dataset demand and embeddings disagree on region order")
        arrays.append(("emb_vectors", embeddings.vectors))
        arrays.append(("emb_coverage", embeddings.coverage.astype(np.float64)))
    write_container(path, "dataset", arrays, meta)


def load_dataset(path: str) -> tuple[DemandMatrix, EmbeddingTable | None]:
    from .container import expect_kind, read_container

    kind, arrays, meta = read_container(path)
    expect_kind(path, "dataset", kind)
    if "demand" not in arrays:
        raise ValidationError(f"{path}: dataset container has no demand array")
    region_ids = [str(r) for r in meta.get("region_ids", [])]
    demand = DemandMatrix(
        values=arrays["demand"],
        t0=parse_timestamp(meta["t0"]),
        bin=timedelta(seconds=float(meta["bin_seconds"])),
        region_order=region_ids,
    )
    table = None
    if "emb_vectors" in arrays:
        table = EmbeddingTable(
            vectors=arrays["emb_vectors"],
            coverage=np.rint(arrays["emb_coverage"]).astype(np.int64),
            region_order=region_ids,
        )
    return demand, table


def save_embedding_table(path: str, table: EmbeddingTable) -> None:
    from .container import write_container

    write_container(
        path,
        "embeddings",
        [("vectors", table.vectors), ("coverage", table.coverage.astype(np.float64))],
        {"region_ids": table.region_order},
    )


def load_embedding_table(path: str) -> EmbeddingTable:
    from .container import expect_kind, read_container

    kind, arrays, meta = read_container(path)
    expect_kind(path, "embeddings", kind)
    return EmbeddingTable(
        vectors=arrays["vectors"],
        coverage=np.rint(arrays["coverage"]).astype(np.int64),
        region_order=[str(r) for r in meta.get("region_ids", [])],
    )


@dataclass
class WindowedDataset:
    """Sliding windows over the demand series with contiguous time splits.

    ``inputs[s]`` is rows [s, s+M) of the series, ``targets[s]`` is rows
    [s+M, s+M+H). Splits cut the window index range at ``bounds``; windows
    are never shuffled across the split boundaries.
    """

    inputs: np.ndarray
    targets: np.ndarray
    input_steps: int
    horizon: int
    bounds: tuple[int, int]
    split_ratios: tuple[float, float, float]

    @property
    def n_windows(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.inputs.shape[2]

    @property
    def train(self) -> slice:
        return slice(0, self.bounds[0])

    @property
    def val(self) -> slice:
        return slice(self.bounds[0], self.bounds[1])

    @property
    def test(self) -> slice:
        return slice(self.bounds[1], self.n_windows)

    @property
    def train_row_end(self) -> int:
        """Exclusive end of the raw series rows touched by training windows."""
        last = self.bounds[0] - 1
        return last + self.input_steps + self.horizon

    def split_arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        sl = {"train": self.train, "val": self.val, "test": self.test}[name]
        return self.inputs[sl], self.targets[sl]

    def transformed(self, fn) -> "WindowedDataset":
        return WindowedDataset(
            inputs=fn(self.inputs),
            targets=fn(self.targets),
            input_steps=self.input_steps,
            horizon=self.horizon,
            bounds=self.bounds,
            split_ratios=self.split_ratios,
        )


def make_windows(
    demand: "DemandMatrix | np.ndarray",
    input_steps: int = 12,
    horizon: int = 3,
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> WindowedDataset:
    """Cut a (T, n) series into S = T - M - H + 1 overlapping windows.

    Split boundaries land at floor(S * train) and floor(S * (train + val)),
    except that the training split is never left empty while windows exist
    (a one-window series is all train).
    """
    values = demand.values if isinstance(demand, DemandMatrix) else np.asarray(demand, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"series must be 2-d (time, node), got shape {values.shape}")
    if input_steps < 1 or horizon < 1:
        raise ValidationError(f"input_steps and horizon must be >= 1, got {input_steps}, {horizon}")
    r = tuple(float(x) for x in split_ratios)
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9 or r[0] <= 0:
        raise ValidationError(f"split ratios must be non-negative, sum to 1, train > 0; got {r}")
    t_len, _ = values.shape
    n_windows = t_len - input_steps - horizon + 1
    if n_windows < 1:
        raise InsufficientDataError(
            f"series of {t_len} rows is too short for one window of {input_steps}+{horizon} rows"
        )
    window = np.lib.stride_tricks.sliding_window_view(values, input_steps + horizon, axis=0)
    # sliding_window_view puts the window axis last: (S, n, M+H) -> (S, M+H, n)
    window = window[:n_windows].transpose(0, 2, 1)
    inputs = np.ascontiguousarray(window[:, :input_steps, :])
    targets = np.ascontiguousarray(window[:, input_steps:, :])
    b1 = int(n_windows * r[0])
    b2 = int(n_windows * (r[0] + r[1]))
    b1 = max(1, b1)
    b2 = min(max(b2, b1), n_windows)
    return WindowedDataset(
        inputs=inputs,
        targets=targets,
        input_steps=input_steps,
        horizon=horizon,
        bounds=(b1, b2),
        split_ratios=r,
    )


@dataclass
class Normalizer:
    """Z-score transform with statistics fit on training rows only.

    ``zscore_per_node`` keeps one (mean, std) per region; ``zscore_global``
    keeps scalars. Standard deviations are clamped to 1e-8 so constant
    columns round-trip instead of dividing by zero.
    """

    mode: str
    mean: np.ndarray
    std: np.ndarray

    MODES = ("zscore_per_node", "zscore_global")

    @classmethod
    def fit(cls, train_rows: np.ndarray, mode: str = "zscore_per_node") -> "Normalizer":
        if mode not in cls.MODES:
            raise ValidationError(f"normalizer mode must be one of {cls.MODES}, got {mode!r}")
        rows = np.asarray(train_rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValidationError(f"normalizer needs a non-empty (rows, nodes) array, got {rows.shape}")
        axis = 0 if mode == "zscore_per_node" else None
        mean = rows.mean(axis=axis)
        std = np.maximum(rows.std(axis=axis), 1e-8)
        return cls(mode=mode, mean=np.atleast_1d(mean), std=np.atleast_1d(std))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean
