"""Minimal SVG line charts for report figures."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 800, 500
MARGIN = 70


def line_chart(xs, ys, title="", xlabel="", ylabel="", logy=False, logx=False):
    pts = [(x, y) for x, y in zip(xs, ys)
           if x is not None and y is not None and math.isfinite(x) and math.isfinite(y)
           and (not logx or x > 0) and (not logy or y > 0)]
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    ty = (lambda v: math.log10(v)) if logy else (lambda v: v)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="30" text-anchor="middle" font-size="18">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 15}" text-anchor="middle" font-size="14">{escape(xlabel)}</text>',
        f'<text x="20" y="{HEIGHT / 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {HEIGHT / 2})">{escape(ylabel)}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
        f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="black"/>',
    ]
    if pts:
        X = [tx(x) for x, _ in pts]
        Y = [ty(y) for _, y in pts]
        x0, x1 = min(X), max(X)
        y0, y1 = min(Y), max(Y)
        if x1 == x0:
            x0, x1 = x0 - 1, x1 + 1
        if y1 == y0:
            y0, y1 = y0 - 1, y1 + 1
        sx = (WIDTH - 2 * MARGIN) / (x1 - x0)
        sy = (HEIGHT - 2 * MARGIN) / (y1 - y0)
        path = " ".join(
            f"{'M' if i == 0 else 'L'}{MARGIN + (x - x0) * sx:.2f},{HEIGHT - MARGIN - (y - y0) * sy:.2f}"
            for i, (x, y) in enumerate(zip(X, Y))
        )
        out.append(f'<path d="{path}" fill="none" stroke="steelblue" stroke-width="2"/>')
        fmt = (lambda v: f"1e{v:.2g}") if logy else (lambda v: f"{v:.3g}")
        out.append(f'<text x="{MARGIN - 5}" y="{MARGIN + 5}" text-anchor="end" font-size="11">{fmt(y1)}</text>')
        out.append(f'<text x="{MARGIN - 5}" y="{HEIGHT - MARGIN}" text-anchor="end" font-size="11">{fmt(y0)}</text>')
        fx = (lambda v: f"1e{v:.2g}") if logx else (lambda v: f"{v:.3g}")
        out.append(f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 18}" text-anchor="middle" font-size="11">{fx(x0)}</text>')
        out.append(f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 18}" text-anchor="middle" font-size="11">{fx(x1)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
