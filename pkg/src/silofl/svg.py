"""Hand-rolled SVG emission for run reports; no plotting dependency.

Output is deterministic: no timestamps, fixed palettes, repr-formatted
coordinates rounded to two decimals.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

_PALETTE = ("#1f6fb2", "#c23b22", "#2e8b57", "#8a2be2", "#d2691e", "#2f4f4f")
_W, _H = 640, 400
_MARGIN = 55


def _finite(values):
    return [v for v in values if isinstance(v, (int, float)) and math.isfinite(v)]


def _scale(vmin, vmax):
    if vmax <= vmin:
        vmax = vmin + 1.0
    span = vmax - vmin
    return vmin - 0.05 * span, vmax + 0.05 * span


def _line(x1, y1, x2, y2, color="#444", width=1):
    return f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{color}" stroke-width="{width}"/>'


def _text(x, y, s, size=12, anchor="start", color="#222"):
    return f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="monospace" text-anchor="{anchor}" fill="{color}">{s}</text>'


def _frame(title, xlabel, ylabel, xmin, xmax, ymin, ymax):
    parts = [
        _line(_MARGIN, _H - _MARGIN, _W - 15, _H - _MARGIN),
        _line(_MARGIN, 15, _MARGIN, _H - _MARGIN),
        _text(_W / 2, 14, title, size=14, anchor="middle"),
        _text(_W / 2, _H - 8, xlabel, anchor="middle"),
        _text(14, _H / 2, ylabel, anchor="middle"),
        _text(_MARGIN, _H - _MARGIN + 16, f"{xmin:.3g}", size=10),
        _text(_W - 15, _H - _MARGIN + 16, f"{xmax:.3g}", size=10, anchor="end"),
        _text(_MARGIN - 4, _H - _MARGIN, f"{ymin:.3g}", size=10, anchor="end"),
        _text(_MARGIN - 4, 22, f"{ymax:.3g}", size=10, anchor="end"),
    ]
    return parts


def _to_px(x, y, xmin, xmax, ymin, ymax):
    px = _MARGIN + (x - xmin) / (xmax - xmin) * (_W - 15 - _MARGIN)
    py = (_H - _MARGIN) - (y - ymin) / (ymax - ymin) * (_H - _MARGIN - 15)
    return px, py


def _document(parts: list[str]) -> str:
    body = "\n".join(parts)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">\n<rect width="100%" height="100%" fill="white"/>\n'
        f"{body}\n</svg>\n"
    )


def line_chart(
    series: dict[str, Sequence[float]],
    path,
    title: str = "",
    xlabel: str = "round",
    ylabel: str = "",
    x_values: Optional[Sequence[float]] = None,
) -> None:
    """One polyline per named series; non-finite points break the line."""
    all_y = _finite([v for vals in series.values() for v in vals])
    n = max(len(vals) for vals in series.values())
    xs = list(x_values) if x_values is not None else list(range(1, n + 1))
    ymin, ymax = _scale(min(all_y, default=0.0), max(all_y, default=1.0))
    xmin, xmax = _scale(min(xs), max(xs))
    parts = _frame(title, xlabel, ylabel, min(xs), max(xs), ymin, ymax)
    for k, (name, vals) in enumerate(sorted(series.items())):
        color = _PALETTE[k % len(_PALETTE)]
        segment = []
        chunks = []
        for x, y in zip(xs, vals):
            if isinstance(y, float) and not math.isfinite(y):
                if segment:
                    chunks.append(segment)
                segment = []
                continue
            segment.append(_to_px(x, y, xmin, xmax, ymin, ymax))
        if segment:
            chunks.append(segment)
        for chunk in chunks:
            pts = " ".join(f"{px:.2f},{py:.2f}" for px, py in chunk)
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'
            )
        parts.append(_text(_W - 150, 30 + 16 * k, name, color=color))
    with open(path, "w") as fh:
        fh.write(_document(parts))


def scatter(
    x: Sequence[float],
    y: Sequence[float],
    path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    labels: Optional[Sequence[str]] = None,
) -> None:
    xmin, xmax = _scale(min(x), max(x))
    ymin, ymax = _scale(min(y), max(y))
    parts = _frame(title, xlabel, ylabel, min(x), max(x), min(y), max(y))
    for i, (xi, yi) in enumerate(zip(x, y)):
        px, py = _to_px(xi, yi, xmin, xmax, ymin, ymax)
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="4" fill="{_PALETTE[0]}"/>')
        if labels is not None:
            parts.append(_text(px + 6, py - 6, labels[i], size=10))
    with open(path, "w") as fh:
        fh.write(_document(parts))


def image_gallery(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    side: int,
    path,
    title: str = "recovered vs true",
) -> None:
    """Grayscale (true, recovered) image pairs rendered as pixel rects."""
    cell = max(2, 56 // side)
    pad = 10
    pair_w = 2 * side * cell + 3 * pad
    cols = max(1, (_W - pad) // pair_w)
    rows = math.ceil(len(pairs) / cols)
    height = rows * (side * cell + 2 * pad) + 30
    parts = [_text(_W / 2, 18, title, size=14, anchor="middle")]
    for idx, (true_img, rec_img) in enumerate(pairs):
        r, c = divmod(idx, cols)
        ox = pad + c * pair_w
        oy = 30 + r * (side * cell + 2 * pad)
        for which, img in enumerate((true_img, rec_img)):
            base_x = ox + which * (side * cell + pad)
            grid = np.clip(np.asarray(img, dtype=float).reshape(side, side), 0.0, 1.0)
            for i in range(side):
                for j in range(side):
                    shade = int(round(255 * (1.0 - grid[i, j])))
                    parts.append(
                        f'<rect x="{base_x + j * cell}" y="{oy + i * cell}" '
                        f'width="{cell}" height="{cell}" fill="rgb({shade},{shade},{shade})"/>'
                    )
    body = "\n".join(parts)
    doc = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{height}" '
        f'viewBox="0 0 {_W} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
        f"{body}\n</svg>\n"
    )
    with open(path, "w") as fh:
        fh.write(doc)
