"""Turn reconstruction errors into anomaly flags, a smoothed failure
probability, detection events and the lead-time evaluation.

Per window: error -> binary anomaly flag y (strict exceedance of the
calibrated threshold) -> exponentially smoothed z via
``z_t = z_{t-1} + alpha * (y_t - z_{t-1})`` with ``z_0 = y_0``. A failure
onset is the first window with z above the failure threshold; the failure
ends at the first window where z stops strictly increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import AutoencoderModel, reconstruction_error
from .errors import CalibrationError, ConfigError, OrderingError, ShapeError
from .ingest import FailureAnnotation, normalize_window_values
from .windowing import Window

STATE_NORMAL = "normal"
STATE_WARNING = "warning"
STATE_FAILURE = "failure"

ONSET = "failure_onset"
END = "failure_end"

_MINUTE = np.timedelta64(60, "s")


@dataclass(frozen=True)
class AnomalyThreshold:
    """Anomaly cutoff: ``beta`` times the 99th-percentile validation error."""

    q99: float
    beta: float
    tau_anom: float

    def __post_init__(self):
        if self.q99 < 0:
            raise CalibrationError(f"q99 must be >= 0, got {self.q99}")
        if not math.isclose(self.tau_anom, self.beta * self.q99, rel_tol=1e-12, abs_tol=0.0):
            raise CalibrationError("tau_anom must equal beta * q99")


@dataclass(frozen=True)
class SignalRecord:
    start_time: np.datetime64
    error: float
    y: int
    z: float
    state: str


@dataclass(frozen=True)
class DetectionEvent:
    kind: str
    time: np.datetime64


@dataclass(frozen=True)
class AnnotationResult:
    label: str
    detected: bool
    detection_time: np.datetime64 | None
    lead_minutes: float | None


@dataclass(frozen=True)
class EvaluationReport:
    annotations: tuple[AnnotationResult, ...]
    false_positive_events: int
    precision: float
    recall: float
    f1: float
    vacuous: bool = False


def nearest_rank_percentile(values, percentile: float) -> float:
    """Nearest-rank order statistic: the ceil(p/100 * n)-th smallest value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise CalibrationError("cannot take a percentile of an empty list")
    if not 0 < percentile <= 100:
        raise ConfigError(f"percentile must be in (0, 100], got {percentile}")
    rank = max(1, math.ceil(percentile / 100.0 * arr.size))
    return float(np.sort(arr)[rank - 1])


def calibrate_threshold(validation_errors, beta: float = 3.0) -> AnomalyThreshold:
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    q99 = nearest_rank_percentile(validation_errors, 99.0)
    return AnomalyThreshold(q99=q99, beta=beta, tau_anom=beta * q99)


def classify_window(error: float, threshold: AnomalyThreshold) -> int:
    """1 iff the error strictly exceeds the anomaly threshold."""
    return 1 if error > threshold.tau_anom else 0


def lowpass(y_sequence, alpha: float = 0.15) -> np.ndarray:
    """Exact first-order low-pass of a sequence, seeded with its first element."""
    if not 0 < alpha <= 1:
        raise ConfigError(f"smoothing factor must be in (0, 1], got {alpha}")
    y = np.asarray(y_sequence, dtype=np.float64)
    z = np.empty_like(y)
    prev = 0.0
    for t, yt in enumerate(y):
        prev = yt if t == 0 else prev + alpha * (yt - prev)
        z[t] = prev
    return z


def failure_state(z: float, warn_threshold: float, fail_threshold: float = 0.5) -> str:
    if not 0 < warn_threshold < fail_threshold <= 1:
        raise ConfigError(
            f"require 0 < warn < fail <= 1, got warn={warn_threshold} fail={fail_threshold}"
        )
    if z > fail_threshold:
        return STATE_FAILURE
    if z > warn_threshold:
        return STATE_WARNING
    return STATE_NORMAL


def detect(
    windows,
    model: AutoencoderModel,
    threshold: AnomalyThreshold,
    alpha: float = 0.15,
    warn_threshold: float = 0.1,
    fail_threshold: float = 0.5,
):
    """Run the eval-mode model over raw windows, one forward pass per window.

    Returns (records, events): one ``SignalRecord`` per window, plus onset/end
    events in strictly increasing, alternating order.
    """
    if not 0 < alpha <= 1:
        raise ConfigError(f"smoothing factor must be in (0, 1], got {alpha}")
    failure_state(warn_threshold / 2 + 1e-12, warn_threshold, fail_threshold)  # validate ordering
    records: list[SignalRecord] = []
    events: list[DetectionEvent] = []
    z_prev = 0.0
    in_failure = False
    last_time = None
    for i, window in enumerate(windows):
        if last_time is not None and window.start_time <= last_time:
            raise OrderingError(f"window at {window.start_time} is out of order")
        last_time = window.start_time
        normalized = normalize_window_values(window.values, model.normalization)
        recon = model.net.forward(normalized[None], train=False)[0]
        error = reconstruction_error(normalized, recon)
        y = classify_window(error, threshold)
        z = float(y) if i == 0 else z_prev + alpha * (y - z_prev)
        state = failure_state(z, warn_threshold, fail_threshold)
        records.append(SignalRecord(window.start_time, error, y, z, state))
        if not in_failure:
            if z > fail_threshold:
                events.append(DetectionEvent(ONSET, window.start_time))
                in_failure = True
        elif z <= z_prev:
            events.append(DetectionEvent(END, window.start_time))
            in_failure = False
        z_prev = z
    return records, events


def evaluate(
    events,
    annotations,
    lead_requirement_minutes: float = 120.0,
    early_grace_hours: float = 12.0,
) -> EvaluationReport:
    """Event-level scoring against annotated failures.

    An annotation is detected iff some onset falls inside
    [start - grace, lps_time - lead]; onsets overlapping no annotation's
    [start - grace, end] window are false positives. With nothing predicted
    and nothing annotated the score is vacuously perfect and flagged as such.
    """
    onsets = sorted(e.time for e in events if e.kind == ONSET)
    grace = np.timedelta64(int(round(early_grace_hours * 3600)), "s")
    lead = np.timedelta64(int(round(lead_requirement_minutes * 60)), "s")

    results = []
    matched = set()
    for ann in annotations:
        lo = ann.start - grace
        overlapping = [t for t in onsets if lo <= t <= ann.end]
        matched.update(overlapping)
        detection_time = overlapping[0] if overlapping else None
        if detection_time is not None:
            lead_minutes = float((ann.lps_time - detection_time) / _MINUTE)
            detected = detection_time <= ann.lps_time - lead
        else:
            lead_minutes = None
            detected = False
        results.append(AnnotationResult(ann.label, detected, detection_time, lead_minutes))

    tp = sum(r.detected for r in results)
    fn = len(results) - tp
    fp = sum(1 for t in onsets if t not in matched)

    if not onsets and not results:
        return EvaluationReport((), 0, 1.0, 1.0, 1.0, vacuous=True)
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return EvaluationReport(tuple(results), fp, precision, recall, f1)
