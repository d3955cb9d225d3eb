"""CSV ingestion, dataset splitting and per-channel normalization.

On-disk format: headered CSV, first column an ISO-8601 timestamp at a
nominal 1 Hz cadence, one column per sensor channel after that. Frames are
immutable; every operation returns a new ``SensorFrame``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, RangeError, SchemaError, ShapeError

logger = logging.getLogger(__name__)

ANALOG_CHANNELS = (
    "TP2",
    "TP3",
    "H1",
    "DV_pressure",
    "Reservoirs",
    "Oil_temperature",
    "Flowmeter",
    "Motor_current",
)
DIGITAL_CHANNELS = ("COMP", "LPS")
DEFAULT_SCHEMA = ANALOG_CHANNELS + DIGITAL_CHANNELS

# Carried for ground truth only; never fed to the model or the rule learner.
GROUND_TRUTH_CHANNELS = ("LPS",)

GAP_FORWARD_FILL = "forward_fill"
GAP_REJECT = "reject"

SECOND = np.timedelta64(1, "s")


def feature_channels(schema) -> tuple[str, ...]:
    """Channels eligible as model/rule features (ground-truth-only ones dropped)."""
    return tuple(c for c in schema if c not in GROUND_TRUTH_CHANNELS)


@dataclass(frozen=True)
class SensorFrame:
    """A timestamped multichannel series; ``values`` has shape (channels, samples)."""

    timestamps: np.ndarray
    channels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "values", vals)
        if ts.ndim != 1:
            raise DataError("timestamps must be one-dimensional")
        if vals.shape != (len(self.channels), ts.shape[0]):
            raise DataError(
                f"values shape {vals.shape} does not match "
                f"{len(self.channels)} channels x {ts.shape[0]} samples"
            )
        if ts.shape[0] > 1 and np.any(np.diff(ts) <= np.timedelta64(0, "s")):
            raise DataError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(vals)):
            raise DataError("frame contains non-finite values")
        ts.setflags(write=False)
        vals.setflags(write=False)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_samples(self) -> int:
        return int(self.timestamps.shape[0])

    def channel_index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise SchemaError(f"channel {name!r} not present in frame") from None

    def channel_values(self, name: str) -> np.ndarray:
        return self.values[self.channel_index(name)]

    def select_channels(self, names) -> "SensorFrame":
        rows = [self.channel_index(n) for n in names]
        return SensorFrame(self.timestamps, tuple(names), self.values[rows])


@dataclass(frozen=True)
class FailureAnnotation:
    """A known failure interval plus the instant the onboard low-pressure alarm fired."""

    label: str
    start: np.datetime64
    end: np.datetime64
    lps_time: np.datetime64

    def __post_init__(self):
        for field in ("start", "end", "lps_time"):
            object.__setattr__(self, field, np.datetime64(getattr(self, field), "s"))
        if not (self.start < self.lps_time <= self.end):
            raise DataError(
                f"annotation {self.label!r}: require start < lps_time <= end, "
                f"got {self.start} / {self.lps_time} / {self.end}"
            )


# Maintenance-report ground truth for the MetroPT2 recording (Apr-Jul 2022).
METROPT2_FAILURES = (
    FailureAnnotation(
        "air_leak", "2022-06-04 10:19:24", "2022-06-04 14:22:39", "2022-06-04 11:26:01"
    ),
    FailureAnnotation(
        "oil_leak", "2022-07-11 10:10:18", "2022-07-14 10:22:08", "2022-07-13 19:43:52"
    ),
)

METROPT2_CUTOFF = np.datetime64("2022-06-01 00:00:00", "s")


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel population mean/std fitted on the training period.

    Constant channels are flagged and get std 1.0 so normalization maps them
    to zero instead of dividing by zero.
    """

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        constant = np.asarray(self.constant, dtype=bool)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "constant", constant)
        if not (mean.shape == std.shape == constant.shape) or mean.ndim != 1:
            raise ShapeError("normalization stats must be equal-length vectors")
        if np.any(std <= 0):
            raise DataError("normalization std must be positive")
        for arr in (mean, std, constant):
            arr.setflags(write=False)

    @property
    def n_channels(self) -> int:
        return int(self.mean.shape[0])


@dataclass(frozen=True)
class DatasetSplit:
    train: SensorFrame
    test: SensorFrame
    cutoff: np.datetime64


def _parse_timestamps(strings) -> np.ndarray:
    try:
        return np.array(strings, dtype="datetime64[s]")
    except ValueError as exc:
        raise DataError(f"unparseable timestamp: {exc}") from None


def _parse_values(rows) -> np.ndarray:
    try:
        return np.array(rows, dtype=np.float64)
    except ValueError:
        cleaned = [[cell if cell.strip() else "nan" for cell in row] for row in rows]
        try:
            return np.array(cleaned, dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"unparseable sensor value: {exc}") from None


def load_csv(path, schema=DEFAULT_SCHEMA, gap_policy: str = GAP_FORWARD_FILL) -> SensorFrame:
    """Load a sensor CSV, order channels per ``schema`` and apply the gap policy.

    ``forward_fill`` regularizes onto the 1 Hz grid between the first and last
    timestamp, repeating the previous row for missing seconds and the previous
    value for missing cells. ``reject`` raises on any gap or missing value.
    """
    if gap_policy not in (GAP_FORWARD_FILL, GAP_REJECT):
        raise ConfigError(f"unknown gap policy {gap_policy!r}")
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    if not rows:
        raise DataError(f"{path}: no data rows")
    if len(header) < 2:
        raise SchemaError(f"{path}: need a timestamp column plus sensor columns")

    columns = {name: i for i, name in enumerate(header[1:], start=1)}
    missing = [c for c in schema if c not in columns]
    if missing:
        raise SchemaError(f"{path}: header is missing channels {missing}")

    ts = _parse_timestamps([row[0] for row in rows])
    if ts.shape[0] > 1 and np.any(np.diff(ts) <= np.timedelta64(0, "s")):
        raise DataError(f"{path}: timestamps are not strictly increasing")

    sel = [columns[c] for c in schema]
    mat = _parse_values([[row[i] for i in sel] for row in rows])

    grid = np.arange(ts[0], ts[-1] + SECOND, SECOND)
    n_inserted = int(grid.shape[0] - ts.shape[0])
    n_missing_cells = int(np.isnan(mat).sum())

    if gap_policy == GAP_REJECT:
        if n_inserted:
            raise DataError(f"{path}: {n_inserted} missing rows on the 1 Hz grid")
        if n_missing_cells:
            raise DataError(f"{path}: {n_missing_cells} missing values")
        return SensorFrame(ts, tuple(schema), mat.T)

    if n_inserted:
        src = np.searchsorted(ts, grid, side="right") - 1
        mat = mat[src]
    values = np.ascontiguousarray(mat.T)
    if n_missing_cells:
        nan_mask = np.isnan(values)
        idx = np.where(~nan_mask, np.arange(values.shape[1])[None, :], 0)
        np.maximum.accumulate(idx, axis=1, out=idx)
        values = np.take_along_axis(values, idx, axis=1)
        if np.isnan(values[:, 0]).any():
            raise DataError(f"{path}: leading missing values cannot be forward-filled")
    if n_inserted or n_missing_cells:
        logger.info(
            "%s: forward-filled %d missing rows and %d missing cells",
            path,
            n_inserted,
            n_missing_cells,
        )
    return SensorFrame(grid, tuple(schema), values)


def write_csv(frame: SensorFrame, path) -> None:
    """Serialize a frame; float values use shortest round-trip decimal form."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("timestamp",) + frame.channels)
        for t, row in zip(frame.timestamps, frame.values.T):
            writer.writerow([str(t)] + [repr(float(v)) for v in row])


def load_annotations(path) -> list[FailureAnnotation]:
    with open(path, encoding="utf-8") as fh:
        try:
            entries = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid annotation file: {exc}") from None
    out = []
    for e in entries:
        try:
            out.append(FailureAnnotation(e["label"], e["start"], e["end"], e["lps_time"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed annotation entry: {exc}") from None
    return out


def write_annotations(annotations, path) -> None:
    entries = [
        {
            "label": a.label,
            "start": str(a.start),
            "end": str(a.end),
            "lps_time": str(a.lps_time),
        }
        for a in annotations
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2)
        fh.write("\n")


def split_by_timestamp(frame: SensorFrame, cutoff) -> DatasetSplit:
    """Partition into train (< cutoff) and test (>= cutoff)."""
    cutoff = np.datetime64(cutoff, "s")
    if frame.n_samples == 0:
        raise DataError("cannot split an empty frame")
    if cutoff < frame.timestamps[0] or cutoff > frame.timestamps[-1]:
        raise RangeError(
            f"cutoff {cutoff} outside data range "
            f"[{frame.timestamps[0]}, {frame.timestamps[-1]}]"
        )
    k = int(np.searchsorted(frame.timestamps, cutoff, side="left"))
    train = SensorFrame(frame.timestamps[:k], frame.channels, frame.values[:, :k])
    test = SensorFrame(frame.timestamps[k:], frame.channels, frame.values[:, k:])
    return DatasetSplit(train, test, cutoff)


def fit_normalization(train: SensorFrame) -> NormalizationStats:
    """Population mean/std per channel over the whole training period."""
    if train.n_samples == 0:
        raise DataError("cannot fit normalization on an empty frame")
    mean = train.values.mean(axis=1)
    std = train.values.std(axis=1)
    constant = std == 0.0
    return NormalizationStats(mean, np.where(constant, 1.0, std), constant)


def apply_normalization(frame: SensorFrame, stats: NormalizationStats) -> SensorFrame:
    if stats.n_channels != frame.n_channels:
        raise ShapeError(
            f"stats cover {stats.n_channels} channels, frame has {frame.n_channels}"
        )
    values = (frame.values - stats.mean[:, None]) / stats.std[:, None]
    return SensorFrame(frame.timestamps, frame.channels, values)


def normalize_window_values(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Normalize one (channels, length) window with train-period stats."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != stats.n_channels:
        raise ShapeError(
            f"window shape {values.shape} does not match {stats.n_channels} channels"
        )
    return (values - stats.mean[:, None]) / stats.std[:, None]


def holdout_split(items, fraction: float = 0.3):
    """Split a temporally ordered sequence into (fit, validation) parts.

    Validation gets the final ceil(fraction * n) items.
    """
    if not 0 < fraction < 1:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    items = list(items)
    n = len(items)
    if n == 0:
        raise DataError("nothing to split")
    n_val = math.ceil(fraction * n)
    n_fit = n - n_val
    if n_fit == 0:
        raise DataError(
            f"holdout of {n} items at fraction {fraction} leaves no fitting data"
        )
    return items[:n_fit], items[n_fit:]
