"""Minimal SVG line charts (no plotting dependency)."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def line_chart(
    path,
    xs: Sequence[float],
    series: dict[str, Sequence[float]],
    xlabel: str = "",
    ylabel: str = "",
    title: str = "",
    categorical: bool = False,
    width: int = 480,
    height: int = 320,
) -> None:
    """Write a polyline chart; ``categorical`` spaces the x values evenly (e.g. for 0 and 1e6)."""
    left, right, top, bottom = 60, 20, 30, 45
    pw, ph = width - left - right, height - top - bottom
    pos = list(range(len(xs))) if categorical else [float(x) for x in xs]
    x0, x1 = min(pos), max(pos)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    finite = [v for ys in series.values() for v in ys if v is not None and math.isfinite(v)]
    y0, y1 = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{top + ph / 2}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2})">{escape(ylabel)}</text>',
    ]
    for p, x in zip(pos, xs):
        out.append(f'<text x="{sx(p):.1f}" y="{top + ph + 15}" text-anchor="middle">{_fmt(float(x))}</text>')
    for i in range(5):
        y = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{left - 5}" y="{sy(y) + 4:.1f}" text-anchor="end">{_fmt(y)}</text>')
    for n, (name, ys) in enumerate(series.items()):
        color = COLORS[n % len(COLORS)]
        pts = [(sx(p), sy(y)) for p, y in zip(pos, ys) if y is not None and math.isfinite(y)]
        if pts:
            coords = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
            out += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{color}"/>' for a, b in pts]
        out.append(f'<text x="{left + 8}" y="{top + 14 + 14 * n}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
