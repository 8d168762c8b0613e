"""Minimal SVG line charts (axes plus one polyline per series)."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def line_chart(series: dict[str, list[tuple[float, float]]], title: str = "",
               xlabel: str = "", ylabel: str = "", xlim=None, ylim=(0.0, 1.0),
               width: int = 480, height: int = 360) -> str:
    margin = 50
    pts = [p for s in series.values() for p in s]
    if xlim is None:
        xs = [p[0] for p in pts] or [0.0, 1.0]
        xlim = (min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1.0)
    if ylim is None:
        ys = [p[1] for p in pts] or [0.0, 1.0]
        ylim = (min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1.0)
    pw, ph = width - 2 * margin, height - 2 * margin

    def sx(x):
        return margin + (x - xlim[0]) / (xlim[1] - xlim[0]) * pw

    def sy(y):
        return height - margin - (y - ylim[0]) / (ylim[1] - ylim[0]) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
           f'y2="{height - margin}" stroke="black"/>',
           f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
           f'stroke="black"/>']
    for k in range(5):
        fx = xlim[0] + (xlim[1] - xlim[0]) * k / 4
        fy = ylim[0] + (ylim[1] - ylim[0]) * k / 4
        out.append(f'<text x="{sx(fx):.1f}" y="{height - margin + 15}" font-size="10" '
                   f'text-anchor="middle">{fx:.3g}</text>')
        out.append(f'<text x="{margin - 5}" y="{sy(fy) + 3:.1f}" font-size="10" '
                   f'text-anchor="end">{fy:.3g}</text>')
    out.append(f'<text x="{width / 2}" y="20" font-size="13" text-anchor="middle">'
               f'{escape(title)}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 12}" font-size="11" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{height / 2}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {height / 2})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(series.items()):
        colour = _COLOURS[i % len(_COLOURS)]
        if s:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
            out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                       f'points="{coords}"/>')
        out.append(f'<text x="{width - margin + 4 - 90}" y="{margin + 14 * i + 10}" '
                   f'font-size="10" fill="{colour}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, series, **kwargs) -> None:
    Path(path).write_text(line_chart(series, **kwargs))
