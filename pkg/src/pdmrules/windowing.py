"""Overlapping fixed-length windows and their per-channel aggregation.

A window of length L with stride d starts every d samples; trailing samples
that do not fill a whole window are dropped. Aggregation summarizes each
channel with (variance, min, max, mean) — the feature space of the rule
learner, named ``<channel>_<agg>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .ingest import SensorFrame

AGGREGATIONS = ("var", "min", "max", "mean")


@dataclass(frozen=True)
class WindowSpec:
    length: int
    stride: int

    def __post_init__(self):
        if not 1 <= self.stride <= self.length:
            raise ConfigError(
                f"require 1 <= stride <= length, got stride={self.stride} length={self.length}"
            )


@dataclass(frozen=True)
class Window:
    """One (channels, length) slice of a frame; ``start_index`` is 1-based."""

    start_index: int
    start_time: np.datetime64
    channels: tuple[str, ...]
    values: np.ndarray


@dataclass(frozen=True)
class AggregatedWindow:
    """Per-channel (variance, min, max, mean) summary; ``features`` is 4 x channels."""

    start_time: np.datetime64
    channels: tuple[str, ...]
    features: np.ndarray


def window_count(n_samples: int, length: int, stride: int) -> int:
    if n_samples < length:
        raise DataError(f"{n_samples} samples cannot fill a window of length {length}")
    return (n_samples - length) // stride + 1


def make_windows(frame: SensorFrame, spec: WindowSpec) -> list[Window]:
    """All full windows, in temporal order. Values are views into the frame."""
    count = window_count(frame.n_samples, spec.length, spec.stride)
    windows = []
    for i in range(count):
        start = i * spec.stride
        windows.append(
            Window(
                start_index=start + 1,
                start_time=frame.timestamps[start],
                channels=frame.channels,
                values=frame.values[:, start : start + spec.length],
            )
        )
    return windows


def aggregate(window: Window) -> AggregatedWindow:
    """Population variance, min, max and mean of each channel over the window."""
    v = window.values
    features = np.stack(
        [v.var(axis=1), v.min(axis=1), v.max(axis=1), v.mean(axis=1)]
    )
    return AggregatedWindow(window.start_time, window.channels, features)


def feature_names(channels) -> tuple[str, ...]:
    """Channel-major feature naming: all four aggregates of a channel are adjacent."""
    return tuple(f"{ch}_{agg}" for ch in channels for agg in AGGREGATIONS)


def feature_vector(agg: AggregatedWindow) -> np.ndarray:
    """Flatten features channel-major, matching :func:`feature_names` order."""
    return agg.features.T.reshape(-1)
