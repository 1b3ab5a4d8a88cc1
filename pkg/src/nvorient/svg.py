"""Minimal static SVG output: projected scatter plots and heatmaps."""

from __future__ import annotations

from html import escape
from typing import Optional, Sequence

import numpy as np

WIDTH, HEIGHT = 480, 400
MARGIN = 60


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _doc(body: list, width=WIDTH, height=HEIGHT) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">'
    )
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


def scatter(
    points,
    title: str = "",
    x_label: str = "x",
    y_label: str = "y",
    highlight=None,
    project: Optional[np.ndarray] = None,
) -> str:
    """Scatter of 2-D points, or of 3-D points projected with ``project``
    (a 2x3 matrix; default is an oblique view)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    extra = None if highlight is None else np.atleast_2d(np.asarray(highlight, dtype=float))
    if pts.shape[1] == 3:
        if project is None:
            project = np.array([[1.0, -0.5, 0.0], [0.0, -0.35, 1.0]])
        pts = pts @ project.T
        if extra is not None:
            extra = extra @ project.T
    allp = pts if extra is None else np.vstack([pts, extra])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo, hi = lo - 0.05 * span, hi + 0.05 * span

    def sx(v):
        return MARGIN + (v - lo[0]) / (hi[0] - lo[0]) * (WIDTH - 2 * MARGIN)

    def sy(v):
        return HEIGHT - MARGIN - (v - lo[1]) / (hi[1] - lo[1]) * (HEIGHT - 2 * MARGIN)

    body = [
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(lo[0], hi[0]):
        body.append(f'<text x="{_fmt(sx(t))}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(lo[1], hi[1]):
        body.append(f'<text x="{MARGIN - 4}" y="{_fmt(sy(t) + 4)}" text-anchor="end">{t:.3g}</text>')
    body.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 18}" text-anchor="middle">{escape(x_label)}</text>')
    body.append(
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 16 {HEIGHT / 2})">{escape(y_label)}</text>'
    )
    for x, y in pts:
        body.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="3" fill="#c0392b" fill-opacity="0.7"/>')
    if extra is not None:
        for x, y in extra:
            body.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="5" fill="none" stroke="#2c3e50" stroke-width="2"/>')
    return _doc(body)


def _ramp(t: float) -> str:
    # white to dark blue
    t = float(np.clip(t, 0.0, 1.0))
    a = np.array([247, 251, 255])
    b = np.array([8, 48, 107])
    r, g, bl = (a + (b - a) * t).round().astype(int)
    return f"rgb({r},{g},{bl})"


def heatmap(
    values,
    row_labels: Sequence,
    col_labels: Sequence,
    title: str = "",
    row_name: str = "",
    col_name: str = "",
    unit: str = "",
) -> str:
    """Grid of colored cells with a linear ramp; missing values drawn grey."""
    v = np.asarray(values, dtype=float)
    n_rows, n_cols = v.shape
    finite = v[np.isfinite(v)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    cell_w = (WIDTH - 2 * MARGIN - 40) / max(n_cols, 1)
    cell_h = (HEIGHT - 2 * MARGIN) / max(n_rows, 1)
    body = [f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for i in range(n_rows):
        for j in range(n_cols):
            x = MARGIN + j * cell_w
            y = MARGIN + i * cell_h
            val = v[i, j]
            fill = "#bbbbbb" if not np.isfinite(val) else _ramp((val - lo) / (hi - lo) if hi > lo else 0.5)
            body.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(cell_w)}" height="{_fmt(cell_h)}" fill="{fill}" stroke="white"/>')
            if np.isfinite(val) and n_cols * n_rows <= 60:
                shade = "white" if hi > lo and (val - lo) / (hi - lo) > 0.55 else "black"
                body.append(
                    f'<text x="{_fmt(x + cell_w / 2)}" y="{_fmt(y + cell_h / 2 + 4)}" text-anchor="middle" font-size="9" fill="{shade}">{val:.3g}</text>'
                )
    for i, lab in enumerate(row_labels):
        body.append(f'<text x="{MARGIN - 4}" y="{_fmt(MARGIN + (i + 0.5) * cell_h + 4)}" text-anchor="end">{escape(str(lab))}</text>')
    for j, lab in enumerate(col_labels):
        body.append(f'<text x="{_fmt(MARGIN + (j + 0.5) * cell_w)}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle">{escape(str(lab))}</text>')
    body.append(f'<text x="{(WIDTH - 40) / 2}" y="{HEIGHT - 18}" text-anchor="middle">{escape(col_name)}</text>')
    body.append(
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 16 {HEIGHT / 2})">{escape(row_name)}</text>'
    )
    # color bar
    bx = WIDTH - MARGIN
    for k in range(20):
        y = MARGIN + (19 - k) * (HEIGHT - 2 * MARGIN) / 20
        body.append(f'<rect x="{bx}" y="{_fmt(y)}" width="14" height="{_fmt((HEIGHT - 2 * MARGIN) / 20 + 0.5)}" fill="{_ramp(k / 19)}"/>')
    body.append(f'<text x="{bx + 18}" y="{MARGIN + 8}">{hi:.3g}</text>')
    body.append(f'<text x="{bx + 18}" y="{HEIGHT - MARGIN}">{lo:.3g}</text>')
    if unit:
        body.append(f'<text x="{bx}" y="{MARGIN - 8}">{escape(unit)}</text>')
    return _doc(body)
