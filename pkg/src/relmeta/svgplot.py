"""Dependency-free SVG emitters for line plots and matrix heatmaps.

Output is deterministic: no timestamps, no random ids, fixed float
formatting.  Good enough for experiment reports and diffable in review.
"""

from __future__ import annotations

import math


class PlotError(Exception):
    pass


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    start = math.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12:
        out.append(round(t, 12))
        t += step
    return out or [lo, hi]


def line_plot(xs, ys, title="", x_label="", y_label="", width=480, height=320) -> str:
    """Single polyline with axis ticks and point markers; returns SVG text."""
    if len(xs) != len(ys):
        raise PlotError(f"{len(xs)} x values vs {len(ys)} y values")
    if not xs:
        raise PlotError("nothing to plot")
    pad_l, pad_r, pad_t, pad_b = 56, 16, 28, 44
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    span_x = x_hi - x_lo
    span_y = y_hi - y_lo

    def px(x):
        return pad_l + (x - x_lo) / span_x * (width - pad_l - pad_r)

    def py(y):
        return height - pad_b - (y - y_lo) / span_y * (height - pad_t - pad_b)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.0f}" y="16" text-anchor="middle">{title}</text>')
    axis = 'stroke="black" stroke-width="1"'
    parts.append(f'<line x1="{pad_l}" y1="{py(y_lo):.1f}" x2="{width - pad_r}" y2="{py(y_lo):.1f}" {axis}/>')
    parts.append(f'<line x1="{pad_l}" y1="{py(y_lo):.1f}" x2="{pad_l}" y2="{pad_t}" {axis}/>')
    for t in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{px(t):.1f}" y1="{py(y_lo):.1f}" x2="{px(t):.1f}" y2="{py(y_lo) + 4:.1f}" {axis}/>')
        parts.append(f'<text x="{px(t):.1f}" y="{py(y_lo) + 16:.1f}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{pad_l - 4}" y1="{py(t):.1f}" x2="{pad_l}" y2="{py(t):.1f}" {axis}/>')
        parts.append(f'<text x="{pad_l - 7}" y="{py(t) + 3:.1f}" text-anchor="end">{_fmt(t)}</text>')
    if x_label:
        parts.append(f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle">{x_label}</text>')
    if y_label:
        parts.append(
            f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" '
            f'transform="rotate(-90 14 {height / 2:.0f})">{y_label}</text>'
        )
    points = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
    parts.append(f'<polyline points="{points}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>')
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="2.5" fill="#1f6fb2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _cell_color(v: float, lo: float, hi: float) -> str:
    # white -> deep blue ramp
    t = 0.0 if hi == lo else (v - lo) / (hi - lo)
    t = min(max(t, 0.0), 1.0)
    r = round(255 - t * (255 - 31))
    g = round(255 - t * (255 - 111))
    b = round(255 - t * (255 - 178))
    return f"rgb({r},{g},{b})"


def heatmap(matrix, title="", cell=48, value_format="{:.2f}") -> str:
    """Grid heatmap of a rectangular matrix with in-cell values."""
    rows = [list(map(float, row)) for row in matrix]
    if not rows or not rows[0]:
        raise PlotError("empty matrix")
    if any(len(r) != len(rows[0]) for r in rows):
        raise PlotError("ragged matrix")
    n, m = len(rows), len(rows[0])
    flat = [v for row in rows for v in row]
    lo, hi = min(flat), max(flat)
    pad, top = 28, 30 if title else 8
    width = pad + m * cell + 8
    height = top + n * cell + 8
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.0f}" y="18" text-anchor="middle">{title}</text>')
    for i, row in enumerate(rows):
        parts.append(f'<text x="{pad - 6}" y="{top + i * cell + cell / 2 + 3:.0f}" text-anchor="end">{i}</text>')
        for j, v in enumerate(row):
            x, y = pad + j * cell, top + i * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{_cell_color(v, lo, hi)}" stroke="#888" stroke-width="0.5"/>'
            )
            parts.append(
                f'<text x="{x + cell / 2:.0f}" y="{y + cell / 2 + 3:.0f}" '
                f'text-anchor="middle">{value_format.format(v)}</text>'
            )
    for j in range(m):
        parts.append(f'<text x="{pad + j * cell + cell / 2:.0f}" y="{top - 4}" text-anchor="middle">{j}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
