"""Minimal dependency-free SVG scatter plot."""

from __future__ import annotations

from html import escape
from typing import Sequence


def scatter_svg(
    xs: Sequence[float],
    ys: Sequence[float],
    labels: Sequence[str] | None = None,
    xlabel: str = "normalized energy",
    ylabel: str = "accuracy",
    title: str = "",
    width: int = 480,
    height: int = 360,
) -> str:
    margin = 56
    x_lo, x_hi = 0.0, max([1.0] + [float(x) for x in xs])
    y_lo, y_hi = 0.0, 1.0
    pw, ph = width - 2 * margin, height - 2 * margin

    def px(x):
        return margin + (float(x) - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return height - margin - (float(y) - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    for i in range(6):
        fx = x_lo + (x_hi - x_lo) * i / 5
        fy = y_lo + (y_hi - y_lo) * i / 5
        out.append(f'<text x="{px(fx):.1f}" y="{height - margin + 16}" font-size="10" text-anchor="middle">{fx:.2f}</text>')
        out.append(f'<text x="{margin - 6}" y="{py(fy) + 3:.1f}" font-size="10" text-anchor="end">{fy:.1f}</text>')
    out.append(f'<text x="{width / 2:.1f}" y="{height - 12}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="14" y="{height / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{escape(ylabel)}</text>'
    )
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="20" font-size="13" text-anchor="middle">{escape(title)}</text>')
    for i, (x, y) in enumerate(zip(xs, ys)):
        out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="4" fill="steelblue"/>')
        if labels is not None:
            out.append(f'<text x="{px(x) + 6:.1f}" y="{py(y) - 6:.1f}" font-size="10">{escape(str(labels[i]))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
