"""Figure data export and a minimal hand-rendered SVG of the failure signal."""

from __future__ import annotations

import csv

import numpy as np

from .errors import ConfigError

_SVG_HEADER = '<?xml version="1.0" encoding="UTF-8"?>\n'


def signal_series_csv(records, path) -> None:
    """Write the {time, error, y, z} series consumed by external plotting tools."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "error", "y", "z"])
        for r in records:
            writer.writerow([str(r.start_time), repr(r.error), r.y, repr(r.z)])


def render_signal_svg(
    records,
    annotations,
    fail_threshold: float = 0.5,
    width: int = 960,
    height: int = 320,
) -> str:
    """SVG of the smoothed signal with annotated failures shaded and the
    failure threshold drawn as a horizontal line.

    Shaded regions carry class ``failure-shade`` and the threshold line class
    ``fail-threshold`` so the output is structurally checkable.
    """
    records = list(records)
    if not records:
        raise ConfigError("nothing to plot: no signal records")
    margin = 45
    t0 = records[0].start_time
    t1 = records[-1].start_time
    span = float((t1 - t0) / np.timedelta64(1, "s")) or 1.0

    def x_px(t) -> float:
        return margin + (width - 2 * margin) * float((t - t0) / np.timedelta64(1, "s")) / span

    def y_px(z: float) -> float:
        return height - margin - (height - 2 * margin) * min(max(z, 0.0), 1.0)

    parts = [
        _SVG_HEADER,
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n',
        f'<rect width="{width}" height="{height}" fill="white"/>\n',
    ]
    for ann in annotations:
        left = max(margin, min(width - margin, x_px(ann.start)))
        right = max(margin, min(width - margin, x_px(ann.end)))
        if right > left:
            parts.append(
                f'<rect class="failure-shade" x="{left:.2f}" y="{margin}" '
                f'width="{right - left:.2f}" height="{height - 2 * margin}" '
                'fill="#bbbbbb" fill-opacity="0.5"/>\n'
            )
    ty = y_px(fail_threshold)
    parts.append(
        f'<line class="fail-threshold" x1="{margin}" y1="{ty:.2f}" '
        f'x2="{width - margin}" y2="{ty:.2f}" stroke="red" stroke-dasharray="6 3"/>\n'
    )
    points = " ".join(f"{x_px(r.start_time):.2f},{y_px(r.z):.2f}" for r in records)
    parts.append(
        f'<polyline class="z-series" points="{points}" fill="none" stroke="#1f77b4" '
        'stroke-width="1.5"/>\n'
    )
    # axes
    parts.append(
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>\n'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        'stroke="black"/>\n'
    )
    for z_tick in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{margin - 8}" y="{y_px(z_tick) + 4:.2f}" font-size="11" '
            f'text-anchor="end">{z_tick:g}</text>\n'
        )
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 10}" font-size="12" text-anchor="middle">'
        f"{t0} … {t1}</text>\n"
    )
    parts.append("</svg>\n")
    return "".join(parts)


def write_signal_svg(records, annotations, path, fail_threshold: float = 0.5) -> None:
    svg = render_signal_svg(records, annotations, fail_threshold)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
