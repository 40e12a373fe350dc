"""Deterministic SVG trajectory chart for a metrics CSV."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

from ..harness import REFERENCE_NOTE

WIDTH, HEIGHT = 800, 320
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 30, 45


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + step * 1e-9:
        ticks.append(round(v, 12))
        v += step
    return ticks


def trajectory_svg(
    turns: Sequence[int],
    values: Sequence[float],
    baseline_window: tuple = (1, 30),
    injections: Sequence[int] = (),
    band_k: float = 2.0,
    metric: str = "P",
) -> str:
    """Polyline of ``values`` over ``turns`` with the baseline band shaded
    (mean +/- ``band_k`` sample std over the window) and dashed verticals
    at ``injections``."""
    if not turns:
        raise ValueError("no data rows to plot")
    lo_w, hi_w = baseline_window
    window_vals = [v for t, v in zip(turns, values) if lo_w <= t <= hi_w]
    band = None
    if window_vals:
        m = math.fsum(window_vals) / len(window_vals)
        sd = 0.0
        if len(window_vals) > 1:
            sd = math.sqrt(math.fsum((v - m) ** 2 for v in window_vals) / (len(window_vals) - 1))
        band = (m - band_k * sd, m + band_k * sd)

    finite = [v for v in values if math.isfinite(v)]
    y_lo = min(finite + ([band[0]] if band else []))
    y_hi = max(finite + ([band[1]] if band else []))
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo, x_hi = min(turns), max(turns)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1, x_hi + 1
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(t):
        return LEFT + (t - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return TOP + (y_hi - v) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f"<title>{escape(metric)} per turn</title>",
        f"<desc>{escape(REFERENCE_NOTE)}</desc>",
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if band:
        y1, y2 = sy(band[1]), sy(band[0])
        out.append(
            f'<rect class="baseline-band" x="{LEFT:.2f}" y="{y1:.2f}" width="{pw:.2f}" '
            f'height="{max(y2 - y1, 0.5):.2f}" fill="#4c72b0" fill-opacity="0.15"/>'
        )
    # axes
    out.append(f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>')
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>')
    for v in _nice_ticks(y_lo, y_hi):
        y = sy(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{y:.2f}" x2="{LEFT}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.2f}" text-anchor="end">{v:g}</text>')
    for t in _nice_ticks(x_lo, x_hi):
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{TOP + ph}" x2="{x:.2f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{TOP + ph + 16}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 8}" text-anchor="middle">turn</text>')
    out.append(
        f'<text x="14" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {TOP + ph / 2:.2f})">{escape(metric)}</text>'
    )
    for t in injections:
        if x_lo <= t <= x_hi:
            x = sx(t)
            out.append(
                f'<line class="injection" x1="{x:.2f}" y1="{TOP}" x2="{x:.2f}" y2="{TOP + ph}" '
                f'stroke="#c44e52" stroke-dasharray="5,4"/>'
            )
    points = " ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in zip(turns, values) if math.isfinite(v))
    out.append(f'<polyline class="trajectory" points="{points}" fill="none" stroke="#222" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
