"""Deterministic synthetic sensor streams with injected failure episodes.

Failures are additive level shifts on one or more channels. Channel noise is
Gaussian clipped to +-3 sigma, which makes the separation guarantees exact:
out-of-failure samples never exceed baseline max + 3 sigma, and in-failure
samples of an elevated channel never drop below baseline min + delta - 3 sigma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ingest import FailureAnnotation, SensorFrame

SECOND = np.timedelta64(1, "s")


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Sine:
    amplitude: float
    period: float  # seconds

    def __post_init__(self):
        if self.period <= 0:
            raise ConfigError(f"sine period must be positive, got {self.period}")


@dataclass(frozen=True)
class RandomWalk:
    step_sigma: float
    bound: float

    def __post_init__(self):
        if self.step_sigma < 0 or self.bound <= 0:
            raise ConfigError("random walk needs step_sigma >= 0 and bound > 0")


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    baseline: Constant | Sine | RandomWalk
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class FailureSpec:
    """Half-open sample interval [start, end) with per-channel level shifts."""

    start: int
    end: int
    elevations: dict[str, float]
    label: str = ""

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ConfigError(f"bad failure interval [{self.start}, {self.end})")
        if not self.elevations:
            raise ConfigError("failure must elevate at least one channel")
        if any(delta <= 0 for delta in self.elevations.values()):
            raise ConfigError("failure elevations must be positive")


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    duration_samples: int
    channels: tuple[ChannelSpec, ...]
    failures: tuple[FailureSpec, ...] = ()
    start_time: str = "2022-01-01T00:00:00"
    lps_offset_fraction: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "failures", tuple(self.failures))
        if self.duration_samples < 1:
            raise ConfigError("duration must be at least one sample")
        if not self.channels:
            raise ConfigError("need at least one channel")
        if not 0 < self.lps_offset_fraction < 1:
            raise ConfigError(
                f"lps offset fraction must be in (0, 1), got {self.lps_offset_fraction}"
            )
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ConfigError("channel names must be unique")
        intervals = sorted((f.start, f.end) for f in self.failures)
        for (s1, e1), (s2, _) in zip(intervals, intervals[1:]):
            if s2 < e1:
                raise ConfigError(f"failure intervals overlap: [{s1},{e1}) and [{s2},...)")
        for f in self.failures:
            if f.end > self.duration_samples:
                raise ConfigError(f"failure [{f.start},{f.end}) exceeds duration")
            for name in f.elevations:
                if name not in names:
                    raise ConfigError(f"failure elevates unknown channel {name!r}")


def _baseline_series(baseline, n: int, rng) -> np.ndarray:
    if isinstance(baseline, Constant):
        return np.full(n, baseline.value, dtype=np.float64)
    if isinstance(baseline, Sine):
        t = np.arange(n, dtype=np.float64)
        return baseline.amplitude * np.sin(2.0 * np.pi * t / baseline.period)
    if isinstance(baseline, RandomWalk):
        walk = np.cumsum(rng.normal(0.0, baseline.step_sigma, n))
        # fold the unbounded walk into [-bound, bound] by reflection
        b = baseline.bound
        return np.abs(np.mod(walk + b, 4.0 * b) - 2.0 * b) - b
    raise ConfigError(f"unknown baseline process {baseline!r}")


def generate(config: SynthConfig):
    """Produce (frame, annotations); bit-identical for a fixed seed."""
    rng = np.random.default_rng(config.seed)
    n = config.duration_samples
    start = np.datetime64(config.start_time, "s")
    timestamps = start + np.arange(n) * SECOND

    values = np.empty((len(config.channels), n), dtype=np.float64)
    for i, spec in enumerate(config.channels):
        series = _baseline_series(spec.baseline, n, rng)
        if spec.noise_sigma > 0:
            noise = rng.normal(0.0, spec.noise_sigma, n)
            np.clip(noise, -3.0 * spec.noise_sigma, 3.0 * spec.noise_sigma, out=noise)
            series = series + noise
        values[i] = series

    index = {spec.name: i for i, spec in enumerate(config.channels)}
    annotations = []
    for k, failure in enumerate(sorted(config.failures, key=lambda f: f.start), start=1):
        for name, delta in failure.elevations.items():
            values[index[name], failure.start : failure.end] += delta
        span = failure.end - 1 - failure.start
        lps_offset = max(1, int(round(config.lps_offset_fraction * span)))
        annotations.append(
            FailureAnnotation(
                label=failure.label or f"synthetic-{k}",
                start=timestamps[failure.start],
                end=timestamps[failure.end - 1],
                lps_time=timestamps[failure.start + lps_offset],
            )
        )

    frame = SensorFrame(timestamps, tuple(s.name for s in config.channels), values)
    return frame, annotations


def config_from_dict(seed: int, spec: dict) -> SynthConfig:
    """Build a SynthConfig from the parsed ``synth`` section of a run config."""
    kinds = {"constant": Constant, "sine": Sine, "random_walk": RandomWalk}
    try:
        channels = []
        for ch in spec["channels"]:
            baseline_spec = dict(ch["baseline"])
            kind = baseline_spec.pop("kind")
            if kind not in kinds:
                raise ConfigError(f"unknown baseline kind {kind!r}")
            channels.append(
                ChannelSpec(
                    name=ch["name"],
                    baseline=kinds[kind](**baseline_spec),
                    noise_sigma=float(ch.get("noise_sigma", 0.0)),
                )
            )
        failures = [
            FailureSpec(
                start=int(f["start"]),
                end=int(f["end"]),
                elevations={str(k): float(v) for k, v in f["elevations"].items()},
                label=str(f.get("label", "")),
            )
            for f in spec.get("failures", [])
        ]
        return SynthConfig(
            seed=seed,
            duration_samples=int(spec["duration_samples"]),
            channels=tuple(channels),
            failures=tuple(failures),
            start_time=str(spec.get("start_time", "2022-01-01T00:00:00")),
            lps_offset_fraction=float(spec.get("lps_offset_fraction", 0.3)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed synth section: {exc}") from None
