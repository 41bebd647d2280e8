"""Hand-written deterministic SVG: loss curves and the distance heatmap.

Output depends only on the input values (fixed float formatting, no ids or
timestamps), so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .blockselect import DistanceTable
from .runio import atomic_write_text

W, H = 640, 400
MARGIN = dict(left=60, right=20, top=30, bottom=45)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _header(w: int, h: int, title: str) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}" font-family="monospace" font-size="11">',
            f'<rect width="{w}" height="{h}" fill="white"/>',
            f'<text x="{w // 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']


def loss_curve_svg(series: dict[str, np.ndarray], title: str = "training loss",
                   smooth: int = 10) -> str:
    """Per-iteration loss curves (moving average over ``smooth`` iterations)."""
    x0, x1 = MARGIN["left"], W - MARGIN["right"]
    y0, y1 = H - MARGIN["bottom"], MARGIN["top"]
    out = _header(W, H, title)
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    out.append(f'<text x="{(x0 + x1) // 2}" y="{H - 10}" text-anchor="middle">iteration</text>')
    curves = {k: np.asarray(v, dtype=np.float64) for k, v in series.items() if len(v)}
    if curves:
        n = max(len(v) for v in curves.values())
        lo = min(float(v.min()) for v in curves.values())
        hi = max(float(v.max()) for v in curves.values())
        if hi == lo:
            hi = lo + 1.0

        def px(i):
            return x0 + (x1 - x0) * (i / max(n - 1, 1))

        def py(v):
            return y0 - (y0 - y1) * ((v - lo) / (hi - lo))

        for frac in (0.0, 0.5, 1.0):
            v = lo + frac * (hi - lo)
            out.append(f'<text x="{x0 - 5}" y="{_f(py(v) + 4)}" text-anchor="end">{v:.3f}</text>')
        out.append(f'<text x="{x1}" y="{y0 + 15}" text-anchor="end">{n}</text>')
        for idx, (name, v) in enumerate(curves.items()):
            if smooth > 1 and len(v) >= smooth:
                c = np.cumsum(np.insert(v, 0, 0.0))
                v = np.concatenate([c[1:smooth] / np.arange(1, smooth), (c[smooth:] - c[:-smooth]) / smooth])
            color = PALETTE[idx % len(PALETTE)]
            pts = " ".join(f"{_f(px(i))},{_f(py(y))}" for i, y in enumerate(v))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
            ly = y1 + 14 * idx + 10
            out.append(f'<line x1="{x1 - 150}" y1="{ly}" x2="{x1 - 130}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{x1 - 125}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _ramp(u: float) -> str:
    """Dark blue (low distance) to yellow (high)."""
    stops = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], float)
    u = min(max(u, 0.0), 1.0) * (len(stops) - 1)
    i = min(int(u), len(stops) - 2)
    c = stops[i] + (u - i) * (stops[i + 1] - stops[i])
    return "#" + "".join(f"{int(round(v)):02x}" for v in c)


def heatmap_svg(table: DistanceTable, title: str = "front[n] + back[m]") -> str:
    """All (n, m) combinations; cells with n + m >= L are drawn empty."""
    L = table.L
    g = table.grid()
    cell = max(8, min(40, 480 // max(L - 1, 1)))
    left, top = 50, 40
    w, h = left + cell * (L - 1) + 20, top + cell * (L - 1) + 40
    out = _header(w, h, title)
    valid = g[~np.isnan(g)]
    lo, hi = (float(valid.min()), float(valid.max())) if valid.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    for n in range(1, L):
        for m in range(1, L):
            v = g[n - 1, m - 1]
            x, y = left + (m - 1) * cell, top + (n - 1) * cell
            if np.isnan(v):
                fill, label = "#eeeeee", f"n={n} m={m} (k={n + m} >= L)"
            else:
                fill, label = _ramp((v - lo) / span), f"n={n} m={m} k={n + m} D={v:.6f}"
            out.append(f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="{fill}"><title>{label}</title></rect>')
    out.append(f'<text x="{left + cell * (L - 1) // 2}" y="{h - 12}" text-anchor="middle">m (trailing)</text>')
    out.append(f'<text x="14" y="{top + cell * (L - 1) // 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + cell * (L - 1) // 2})">n (leading)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str | Path, svg: str) -> None:
    atomic_write_text(Path(path), svg)
