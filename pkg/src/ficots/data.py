"""CSV ingestion, chronological splits, z-score scaling and sliding windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from decimal import Decimal
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """An experiment or model setting violates its invariants."""


class DataError(ValueError):
    """Input data could not be ingested."""


@dataclass(frozen=True)
class TimeSeriesFrame:
    timestamps: tuple[str, ...]
    values: np.ndarray  # L x N
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"frame values must be 2-D, got shape {self.values.shape}")
        if len(self.timestamps) != self.values.shape[0]:
            raise DataError("timestamp count does not match row count")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError("channel name count does not match column count")
        if not np.all(np.isfinite(self.values)):
            raise DataError("frame contains non-finite values")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def load_csv(path: str | Path, has_date_column: bool = True) -> TimeSeriesFrame:
    """Read a header-first CSV; the optional leading column holds timestamps.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    first = 1 if has_date_column else 0
    names = tuple(h.strip() for h in header[first:])
    if not names:
        raise DataError(f"{path}: no value columns in header")
    stamps: list[str] = []
    values = np.empty((len(body), len(names)), dtype=np.float64)
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        stamps.append(row[0].strip() if has_date_column else str(r - 1))
        for c, cell in enumerate(row[first:]):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {r}, column {names[c]!r}: cannot parse {cell!r} as a number"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {r}, column {names[c]!r}: non-finite value {cell!r}")
            values[r - 1, c] = v
    return TimeSeriesFrame(tuple(stamps), values, names)


def save_csv(frame: TimeSeriesFrame, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *frame.channel_names])
        for ts, row in zip(frame.timestamps, frame.values):
            w.writerow([ts, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

# Month-count presets. Keys name the layout; values are (train, val, test) months.
SPLIT_PRESETS: dict[str, tuple[int, int, int]] = {
    "ett": (12, 4, 4),
}
DAYS_PER_MONTH = 30


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    few_shot_fraction: float = 1.0
    preset: str = ""

    def validate(self) -> None:
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not (f > 0) for f in fr):
            raise ConfigError(f"split fractions must be positive, got {fr}")
        if sum(Decimal(repr(f)) for f in fr) > 1:
            raise ConfigError(f"split fractions sum to {sum(fr):.6g} > 1")
        if not (0 < self.few_shot_fraction <= 1):
            raise ConfigError(f"few_shot_fraction must lie in (0, 1], got {self.few_shot_fraction}")
        if self.preset and self.preset not in SPLIT_PRESETS:
            raise ConfigError(f"unknown split preset {self.preset!r}")


def _rows_per_month(timestamps: tuple[str, ...]) -> int:
    if len(timestamps) < 2:
        raise ConfigError("month-based split needs at least two timestamps")
    try:
        t0 = datetime.fromisoformat(timestamps[0])
        t1 = datetime.fromisoformat(timestamps[1])
    except ValueError as exc:
        raise ConfigError(f"month-based split needs ISO timestamps: {exc}") from None
    step = (t1 - t0).total_seconds()
    if step <= 0:
        raise ConfigError("timestamps are not increasing")
    per_month = DAYS_PER_MONTH * 86400 / step
    if per_month != int(per_month):
        raise ConfigError(f"sampling step of {step} s does not divide a {DAYS_PER_MONTH}-day month")
    return int(per_month)


def split_bounds(frame: TimeSeriesFrame, spec: SplitSpec) -> tuple[int, int, int]:
    """Cumulative boundaries (a, b, c) of the train/val/test ranges."""
    spec.validate()
    L = frame.length
    if spec.preset:
        per = _rows_per_month(frame.timestamps)
        mt, mv, ms = SPLIT_PRESETS[spec.preset]
        a, b, c = mt * per, (mt + mv) * per, (mt + mv + ms) * per
        if c > L:
            raise ConfigError(f"preset {spec.preset!r} needs {c} rows, frame has {L}")
        return a, b, c
    # decimal arithmetic so that 0.7 + 0.1 + 0.2 is exactly 1
    fr = [Decimal(repr(f)) for f in (spec.train_fraction, spec.val_fraction, spec.test_fraction)]
    a = math.floor(L * fr[0])
    b = math.floor(L * (fr[0] + fr[1]))
    c = math.floor(L * (fr[0] + fr[1] + fr[2]))
    return a, b, min(c, L)


def split(
    frame: TimeSeriesFrame, spec: SplitSpec, T_in: int | None = None, M: int | None = None
) -> tuple[range, range, range]:
    """Chronological train/val/test row ranges.

    With ``T_in`` and ``M`` given, also checks that each split can hold at
    least one window once val/test inputs may reach back ``T_in`` rows.
    """
    a, b, c = split_bounds(frame, spec)
    ranges = (range(0, a), range(a, b), range(b, c))
    if T_in is not None and M is not None:
        for name, rg in zip(("train", "val", "test"), ranges):
            usable = len(rg) + (0 if rg.start == 0 else min(T_in, rg.start))
            if usable < T_in + M:
                raise ConfigError(
                    f"{name} split has {usable} usable rows, needs at least T_in+M={T_in + M}"
                )
    return ranges


def window_slice(rg: range, T_in: int) -> tuple[int, int]:
    """Rows a split may read: inputs may start up to ``T_in`` rows before it."""
    return max(0, rg.start - T_in), rg.stop


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray
    min_std: float = 1e-8

    @property
    def effective_std(self) -> np.ndarray:
        return np.where(self.std < self.min_std, 1.0, self.std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.effective_std

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return z * self.effective_std + self.mean


def fit_scaler(frame: TimeSeriesFrame, train_range: range) -> ScalerStats:
    if len(train_range) == 0:
        raise ConfigError("cannot fit scaler on an empty training range")
    block = frame.values[train_range.start : train_range.stop]
    return ScalerStats(block.mean(axis=0), block.std(axis=0))


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class WindowSample:
    x: np.ndarray  # T_in x N, scaled
    y: np.ndarray  # M x N, scaled
    window_start: int
    instance_mean: np.ndarray
    instance_std: np.ndarray
    raw_x: np.ndarray | None = field(default=None, repr=False)


def window_count(length: int, T_in: int, M: int) -> int:
    return max(0, length - T_in - M + 1)


def make_windows(
    frame: TimeSeriesFrame,
    T_in: int,
    M: int,
    rows: tuple[int, int] | range,
    scaler: ScalerStats | None = None,
) -> list[WindowSample]:
    """Every (input, target) pair that fits inside ``rows`` = [start, end).

    ``window_start`` is an absolute row index into the frame. ``raw_x`` keeps
    unscaled inputs for prompt statistics.
    """
    if T_in < 1 or M < 1:
        raise ConfigError(f"T_in and M must be >= 1, got {T_in}, {M}")
    start, end = (rows.start, rows.stop) if isinstance(rows, range) else rows
    raw = frame.values
    scaled = scaler.transform(raw) if scaler is not None else raw
    out = []
    for k in range(window_count(end - start, T_in, M)):
        s = start + k
        x = scaled[s : s + T_in]
        out.append(
            WindowSample(
                x=x.copy(),
                y=scaled[s + T_in : s + T_in + M].copy(),
                window_start=s,
                instance_mean=x.mean(axis=0),
                instance_std=x.std(axis=0),
                raw_x=raw[s : s + T_in].copy(),
            )
        )
    return out


def few_shot_subset(windows: list, fraction: float) -> list:
    """Chronological prefix holding ``floor(count * fraction)`` windows (at least one)."""
    if not (0 < fraction <= 1):
        raise ConfigError(f"few-shot fraction must lie in (0, 1], got {fraction}")
    n = len(windows)
    if n == 0:
        return []
    keep = max(1, math.floor(n * fraction))
    return windows[:keep]


@dataclass
class DatasetSplits:
    frame: TimeSeriesFrame
    scaler: ScalerStats
    ranges: tuple[range, range, range]
    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]


def prepare(
    frame: TimeSeriesFrame,
    spec: SplitSpec,
    T_in: int,
    M: int,
    scaler: ScalerStats | None = None,
) -> DatasetSplits:
    """Split, fit the scaler on train rows and window every split."""
    ranges = split(frame, spec, T_in, M)
    if scaler is None:
        scaler = fit_scaler(frame, ranges[0])
    train = make_windows(frame, T_in, M, ranges[0], scaler)
    train = few_shot_subset(train, spec.few_shot_fraction)
    val = make_windows(frame, T_in, M, window_slice(ranges[1], T_in), scaler)
    test = make_windows(frame, T_in, M, window_slice(ranges[2], T_in), scaler)
    return DatasetSplits(frame, scaler, ranges, train, val, test)


def synthetic_sinusoids(
    length: int = 2000, n_channels: int = 2, seed: int = 7, noise: float = 0.05
) -> TimeSeriesFrame:
    """Deterministic mixture of sinusoids, one distinct mixture per channel."""
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    cols = []
    for _ in range(n_channels):
        periods = rng.uniform(12.0, 60.0, size=2)
        phases = rng.uniform(0.0, 2 * np.pi, size=2)
        amps = rng.uniform(0.5, 1.5, size=2)
        series = sum(a * np.sin(2 * np.pi * t / p + ph) for a, p, ph in zip(amps, periods, phases))
        cols.append(series + noise * rng.standard_normal(length))
    stamps = tuple(f"t{i}" for i in range(length))
    names = tuple(f"ch{i}" for i in range(n_channels))
    return TimeSeriesFrame(stamps, np.stack(cols, axis=1), names)
