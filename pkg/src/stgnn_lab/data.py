"""Series datasets, chronological splits, z-score scaling, windowing, synthetic traffic."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .graph import Graph

log = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440
KINDS = ("speed", "flow")


def slots_per_day(resolution_minutes: int) -> int:
    if resolution_minutes <= 0 or MINUTES_PER_DAY % resolution_minutes:
        raise ValueError(f"resolution {resolution_minutes} min does not divide a day")
    return MINUTES_PER_DAY // resolution_minutes


def time_indices(stamps: np.ndarray, resolution_minutes: int) -> np.ndarray:
    """(day-of-week with Monday=0, slot-of-day) pairs, shape ``stamps.shape + (2,)``."""
    minutes = np.asarray(stamps).astype("datetime64[m]").astype(np.int64)
    days = np.floor_divide(minutes, MINUTES_PER_DAY)
    dow = (days + 3) % 7  # 1970-01-01 was a Thursday
    slot = np.mod(minutes, MINUTES_PER_DAY) // resolution_minutes
    return np.stack([dow, slot], axis=-1)


@dataclass(frozen=True)
class SeriesDataset:
    values: np.ndarray                # [T_total, n], original units
    timestamps: np.ndarray            # datetime64[s], constant stride
    node_ids: tuple[str, ...]
    kind: str = "speed"
    resolution_minutes: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[1] != len(self.node_ids):
            raise ValueError(f"values {self.values.shape} do not match {len(self.node_ids)} node ids")
        if len(self.timestamps) != self.values.shape[0]:
            raise ValueError("timestamp count differs from row count")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("series contains non-finite values")
        if self.kind == "flow" and np.any(self.values < 0):
            raise ValueError("flow series contains negative values")
        if len(self.timestamps) > 1:
            steps = np.diff(self.timestamps).astype("timedelta64[s]").astype(np.int64)
            if np.any(steps != self.resolution_minutes * 60):
                raise ValueError("timestamps are not at a constant stride equal to the resolution")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def slots_per_day(self) -> int:
        return slots_per_day(self.resolution_minutes)

    @property
    def mape_enabled(self) -> bool:
        return self.kind != "flow"

    def slice(self, start: int, stop: int) -> "SeriesDataset":
        return SeriesDataset(self.values[start:stop], self.timestamps[start:stop], self.node_ids,
                             self.kind, self.resolution_minutes)

    def with_values(self, values: np.ndarray) -> "SeriesDataset":
        return SeriesDataset(np.asarray(values, dtype=np.float64), self.timestamps, self.node_ids,
                             self.kind, self.resolution_minutes)


# ---------------------------------------------------------------------------
# CSV i/o
# ---------------------------------------------------------------------------


def _parse_stamp(text: str) -> np.datetime64:
    dt = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def load_series_csv(path: str | Path, kind: str = "speed",
                    resolution: int | None = None) -> SeriesDataset:
    """Read ``timestamp,<node_id>...`` rows.  Gaps and bad cells are errors, never imputed."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ValueError(f"{path}: empty file")
        if header[0].strip() != "timestamp" or len(header) < 2:
            raise ValueError(f"{path}: header must be 'timestamp,<node_id>...'")
        node_ids = tuple(h.strip() for h in header[1:])
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            try:
                stamps.append(_parse_stamp(row[0]))
                vals = [float(c) for c in row[1:]]
            except ValueError:
                raise ValueError(f"{path}: row {lineno} has an unparsable cell") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}: row {lineno} has a missing or non-finite value")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    ts = np.array(stamps, dtype="datetime64[s]")
    if len(ts) > 1:
        steps = np.diff(ts).astype(np.int64)
        stride = int(steps[0])
        bad = np.nonzero(steps != stride)[0]
        if bad.size:
            raise ValueError(f"{path}: non-constant stride at row {int(bad[0]) + 3} "
                             f"({int(steps[bad[0]]) // 60} min after {stride // 60} min)")
        if stride <= 0 or stride % 60:
            raise ValueError(f"{path}: stride {stride}s is not a positive whole number of minutes")
        inferred = stride // 60
        if resolution is not None and resolution != inferred:
            raise ValueError(f"{path}: declared resolution {resolution} min but file stride is {inferred} min")
        resolution = inferred
    return SeriesDataset(np.array(rows, dtype=np.float64), ts, node_ids, kind,
                         resolution if resolution is not None else 5)


def write_series_csv(ds: SeriesDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *ds.node_ids])
        for stamp, row in zip(ds.timestamps, ds.values):
            w.writerow([str(stamp.astype("datetime64[s]")), *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# splitting and scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    policy: str                       # "fractional" | "days"
    parts: tuple[float, float, float]

    def __post_init__(self):
        if self.policy not in ("fractional", "days"):
            raise ValueError(f"unknown split policy {self.policy!r}")
        if any(p < 0 for p in self.parts):
            raise ValueError("split parts must be non-negative")
        if self.policy == "fractional" and abs(sum(self.parts) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.parts)}")
        if self.policy == "days" and any(p != int(p) for p in self.parts):
            raise ValueError("day-based split needs whole day counts")

    @classmethod
    def fractional(cls, train=0.7, val=0.1, test=0.2) -> "SplitSpec":
        return cls("fractional", (train, val, test))

    @classmethod
    def days(cls, train=21, val=2, test=7) -> "SplitSpec":
        return cls("days", (train, val, test))


def split(ds: SeriesDataset, spec: SplitSpec) -> tuple[SeriesDataset, SeriesDataset, SeriesDataset]:
    """Chronological, contiguous, non-overlapping train/val/test."""
    total = len(ds)
    if spec.policy == "fractional":
        b1 = math.floor(spec.parts[0] * total + 1e-9)
        b2 = math.floor((spec.parts[0] + spec.parts[1]) * total + 1e-9)
        bounds = (0, b1, b2, total)
    else:
        spd = ds.slots_per_day
        lengths = [int(p) * spd for p in spec.parts]
        if sum(lengths) > total:
            raise ValueError(f"day split needs {sum(lengths)} steps but series has {total}")
        if sum(lengths) < total:
            log.warning("day split leaves %d trailing steps unused", total - sum(lengths))
        bounds = (0, lengths[0], lengths[0] + lengths[1], sum(lengths))
    parts = tuple(ds.slice(bounds[i], bounds[i + 1]) for i in range(3))
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) == 0:
            raise ValueError(f"{name} split is empty for series of length {total}")
    return parts


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("scaler std must be positive")

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def scaler_fit(train: SeriesDataset) -> Scaler:
    mean = float(np.mean(train.values))
    std = float(np.std(train.values))
    if std < 1e-8:
        raise ValueError("training series is constant; cannot z-score")
    return Scaler(mean, std)


def scaler_apply(s: Scaler, x, direction: str = "forward"):
    if direction == "forward":
        return s.transform(x)
    if direction == "inverse":
        return s.inverse(x)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowBatch:
    x: np.ndarray        # [B, P, n, 1] original units
    y: np.ndarray        # [B, Q, n]
    times: np.ndarray    # [B, P + Q, 2] (dow, slot)
    index: np.ndarray    # sample indices into the parent WindowSet


@dataclass(frozen=True)
class WindowSet:
    x: np.ndarray
    y: np.ndarray
    x_time: np.ndarray   # [N, P] datetime64
    y_time: np.ndarray   # [N, Q] datetime64
    resolution_minutes: int
    _times: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_times", self._compute_times())

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def P(self) -> int:
        return self.x.shape[1]

    @property
    def Q(self) -> int:
        return self.y.shape[1]

    @property
    def n(self) -> int:
        return self.x.shape[2]

    def _compute_times(self) -> np.ndarray:
        # decoder stamps advance the last input stamp by the resolution
        step = np.timedelta64(self.resolution_minutes, "m")
        future = self.x_time[:, -1:] + step * np.arange(1, self.Q + 1)
        return time_indices(np.concatenate([self.x_time, future], axis=1), self.resolution_minutes)

    def time_features(self) -> np.ndarray:
        return self._times

    def batch(self, idx) -> WindowBatch:
        idx = np.asarray(idx)
        return WindowBatch(self.x[idx], self.y[idx], self._times[idx], idx)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[WindowBatch]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


def make_windows(ds: SeriesDataset, P: int, Q: int, stride: int = 1) -> WindowSet:
    total = len(ds)
    if P < 1 or Q < 1 or stride < 1:
        raise ValueError("P, Q and stride must be positive")
    if total < P + Q:
        raise ValueError(f"series of length {total} is shorter than P+Q={P + Q}")
    starts = np.arange(0, total - P - Q + 1, stride)
    xi = starts[:, None] + np.arange(P)
    yi = starts[:, None] + P + np.arange(Q)
    return WindowSet(ds.values[xi][..., None], ds.values[yi], ds.timestamps[xi], ds.timestamps[yi],
                     ds.resolution_minutes)


# ---------------------------------------------------------------------------
# synthetic traffic
# ---------------------------------------------------------------------------


def _bump(slot: np.ndarray, center: float, width: float, period: int) -> np.ndarray:
    d = np.abs(slot - center)
    d = np.minimum(d, period - d)
    return np.exp(-0.5 * (d / width) ** 2)


def synth_generate(n_nodes: int, n_days: int, seed: int, graph: Graph, noise_std: float = 2.0,
                   resolution_minutes: int = 5, start: str = "2024-01-01T00:00:00",
                   propagation: float = 0.5,
                   incidents: Sequence[tuple[int, int, float]] = ()) -> SeriesDataset:
    """Speeds: 60 + diurnal sinusoid - congestion + white noise, clipped to [0, 120].

    Congestion at node i is its recurring morning/evening rush-hour dip plus
    any ``incidents`` ``(node, step, km/h)``.  Nodes with upstream neighbors
    mix ``1 - propagation`` of that with ``propagation`` times the
    weight-averaged congestion of those neighbors one step earlier.
    Without incidents the congestion is periodic in the day, so an edgeless
    graph yields series with period ``slots_per_day``.
    """
    if graph.n != n_nodes:
        raise ValueError(f"graph has {graph.n} nodes, expected {n_nodes}")
    rng = np.random.default_rng(seed)
    spd = slots_per_day(resolution_minutes)
    total = n_days * spd
    per_hour = 60 / resolution_minutes

    amp = rng.uniform(3.0, 8.0, n_nodes)
    phi = rng.uniform(-0.5, 0.5, n_nodes)
    am_center = (8.0 + rng.uniform(-0.5, 0.5, n_nodes)) * per_hour
    pm_center = (17.5 + rng.uniform(-0.5, 0.5, n_nodes)) * per_hour
    am_depth = rng.uniform(15.0, 30.0, n_nodes)
    pm_depth = rng.uniform(20.0, 35.0, n_nodes)
    width = rng.uniform(0.6, 1.0, n_nodes) * per_hour

    # one day of burn-in so that the recurrence starts in its periodic regime
    slot = np.arange(-spd, total) % spd
    base = 60.0 + amp * np.sin(2 * np.pi * slot[:, None] / spd + phi)
    drive = (am_depth * _bump(slot[:, None], am_center, width, spd)
             + pm_depth * _bump(slot[:, None], pm_center, width, spd))
    for node, step, size in incidents:
        drive[step + spd, node] += size

    w = graph.dense()                                   # w[src, dst]
    np.fill_diagonal(w, 0.0)
    indeg = w.sum(axis=0)
    mix = np.divide(w, indeg, out=np.zeros_like(w), where=indeg > 0)  # column-normalized
    # nodes with upstream neighbors blend their own dip with the lagged upstream one
    keep = np.where(indeg > 0, 1.0 - propagation, 1.0)
    cong = np.zeros_like(drive)
    cong[0] = drive[0]
    for t in range(1, drive.shape[0]):
        cong[t] = keep * drive[t] + propagation * (cong[t - 1] @ mix)
    speed = (base - cong)[spd:]
    if noise_std > 0:
        speed = speed + rng.normal(0.0, noise_std, speed.shape)
    speed = np.clip(speed, 0.0, 120.0)

    t0 = np.datetime64(start, "s")
    stamps = t0 + np.arange(total) * np.timedelta64(resolution_minutes * 60, "s")
    return SeriesDataset(speed, stamps, graph.node_ids, "speed", resolution_minutes)
