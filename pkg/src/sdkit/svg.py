from __future__ import annotations

import math
from html import escape
from pathlib import Path
from typing import Mapping, Sequence

WIDTH = 800
HEIGHT = 480
MARGIN_LEFT = 70
MARGIN_RIGHT = 170
MARGIN_TOP = 40
MARGIN_BOTTOM = 50
MAX_TICKS = 8
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")

Series = tuple[Sequence[float], Sequence[float]]


def axis_extent(values: Sequence[float]) -> tuple[float, float]:
    """Data extent padded by 5% per side; a zero-width extent becomes v-1 .. v+1."""
    lo, hi = min(values), max(values)
    if hi == lo:
        return lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def nice_ticks(lo: float, hi: float, max_ticks: int = MAX_TICKS) -> list[float]:
    """Round-number ticks (1, 2 or 5 times a power of ten) inside [lo, hi]."""
    if not hi > lo:
        return [lo]
    exponent = math.floor(math.log10((hi - lo) / max_ticks))
    while True:
        for mantissa in (1, 2, 5):
            step = mantissa * 10.0 ** exponent
            first = math.ceil(lo / step)
            last = math.floor(hi / step)
            if last - first + 1 <= max_ticks:
                return [k * step for k in range(first, last + 1)]
        exponent += 1


def _tick_label(value: float, step: float) -> str:
    decimals = max(0, -math.floor(math.log10(step))) if step > 0 else 0
    text = f"{value:.{decimals}f}"
    return "0" if float(text) == 0 else text


def render_svg(series: Mapping[str, Series], title: str,
               observations: Mapping[str, Series] | None = None) -> str:
    if not series:
        raise ValueError("need at least one series to plot")
    observations = observations or {}
    xs = [x for ts, _ in (*series.values(), *observations.values()) for x in ts]
    ys = [y for _, vs in (*series.values(), *observations.values()) for y in vs]
    x0, x1 = axis_extent(xs)
    y0, y1 = axis_extent(ys)
    left, right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    top, bottom = MARGIN_TOP, HEIGHT - MARGIN_BOTTOM

    def px(x: float) -> float:
        return left + (x - x0) / (x1 - x0) * (right - left)

    def py(y: float) -> float:
        return bottom - (y - y0) / (y1 - y0) * (bottom - top)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{escape(title)}</text>',
        f'<line class="axis" x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    xt = nice_ticks(x0, x1)
    xstep = xt[1] - xt[0] if len(xt) > 1 else 1.0
    for x in xt:
        out.append(f'<line class="xtick" x1="{px(x):.2f}" y1="{bottom}" x2="{px(x):.2f}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text class="xlabel" x="{px(x):.2f}" y="{bottom + 20}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12">{_tick_label(x, xstep)}</text>')
    yt = nice_ticks(y0, y1)
    ystep = yt[1] - yt[0] if len(yt) > 1 else 1.0
    for y in yt:
        out.append(f'<line class="ytick" x1="{left - 5}" y1="{py(y):.2f}" x2="{left}" y2="{py(y):.2f}" stroke="black"/>')
        out.append(f'<text class="ylabel" x="{left - 8}" y="{py(y) + 4:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="12">{_tick_label(y, ystep)}</text>')

    legend_y = top + 10
    for i, (name, (ts, vs)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(t):.2f},{py(v):.2f}" for t, v in zip(ts, vs))
        out.append(f'<polyline class="series" data-name="{escape(name)}" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<line class="legend" x1="{right + 15}" y1="{legend_y}" x2="{right + 35}" y2="{legend_y}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{right + 40}" y="{legend_y + 4}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
        legend_y += 20
    for j, (name, (ts, vs)) in enumerate(observations.items()):
        color = PALETTE[(len(series) + j) % len(PALETTE)]
        for t, v in zip(ts, vs):
            out.append(f'<circle class="observation" cx="{px(t):.2f}" cy="{py(v):.2f}" r="3" fill="none" stroke="{color}"/>')
        out.append(f'<circle class="legend" cx="{right + 25}" cy="{legend_y}" r="3" fill="none" stroke="{color}"/>')
        out.append(f'<text x="{right + 40}" y="{legend_y + 4}" font-family="sans-serif" font-size="12">'
                   f'{escape(name)} (observed)</text>')
        legend_y += 20
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(series: Mapping[str, Series], title: str, path: str | Path,
             observations: Mapping[str, Series] | None = None) -> Path:
    """Write a self-contained line chart; observations are drawn as circles."""
    path = Path(path)
    path.write_text(render_svg(series, title, observations), encoding="utf-8")
    return path
