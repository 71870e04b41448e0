"""CSV and SVG output."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MARKERS = ("circle", "square", "triangle", "diamond", "cross")


class CsvStream:
    """Append rows with a fixed column order, flushing after each row."""

    def __init__(self, path, columns: Sequence[str]):
        self.columns = tuple(columns)
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.columns)
        self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with CsvStream(path, columns) as out:
        for row in rows:
            out.write(row)


def round_color(k: int, n_rounds: int) -> str:
    """Blue-to-red ramp over reflection rounds."""
    u = 0.0 if n_rounds <= 1 else k / (n_rounds - 1)
    r, g, b = int(40 + 200 * u), int(90 + 40 * (1 - abs(2 * u - 1))), int(230 - 200 * u)
    return f"#{r:02x}{g:02x}{b:02x}"


def _marker(shape: str, x: float, y: float, color: str, size: float = 3.5) -> str:
    if shape == "circle":
        return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{size:.1f}" fill="{color}" fill-opacity="0.7"/>'
    if shape == "square":
        return (
            f'<rect x="{x - size:.2f}" y="{y - size:.2f}" width="{2 * size:.1f}" height="{2 * size:.1f}" '
            f'fill="{color}" fill-opacity="0.7"/>'
        )
    if shape == "triangle":
        pts = f"{x:.2f},{y - size:.2f} {x - size:.2f},{y + size:.2f} {x + size:.2f},{y + size:.2f}"
        return f'<polygon points="{pts}" fill="{color}" fill-opacity="0.7"/>'
    if shape == "diamond":
        pts = f"{x:.2f},{y - size:.2f} {x + size:.2f},{y:.2f} {x:.2f},{y + size:.2f} {x - size:.2f},{y:.2f}"
        return f'<polygon points="{pts}" fill="{color}" fill-opacity="0.7"/>'
    return (
        f'<path d="M{x - size:.2f},{y - size:.2f}L{x + size:.2f},{y + size:.2f}'
        f'M{x - size:.2f},{y + size:.2f}L{x + size:.2f},{y - size:.2f}" stroke="{color}" stroke-width="1.5"/>'
    )


def scatter_svg(
    points: np.ndarray,
    conditions: np.ndarray,
    color: str,
    title: str = "",
    extent: float = 4.0,
    line: tuple[float, float] | None = None,
) -> str:
    """600x600 scatter of the first two coordinates over [-extent, extent]^2.

    ``line = (slope, intercept)`` draws y = slope * x + intercept, e.g. a
    constraint boundary.
    """
    size = 600.0
    pad = 30.0

    def sx(v):
        return pad + (v + extent) / (2 * extent) * (size - 2 * pad)

    def sy(v):
        return size - pad - (v + extent) / (2 * extent) * (size - 2 * pad)

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="600" height="600" viewBox="0 0 600 600">',
        '<rect width="600" height="600" fill="white"/>',
        f'<line x1="{pad}" y1="{sy(0):.2f}" x2="{size - pad}" y2="{sy(0):.2f}" stroke="#bbb"/>',
        f'<line x1="{sx(0):.2f}" y1="{pad}" x2="{sx(0):.2f}" y2="{size - pad}" stroke="#bbb"/>',
        f'<rect x="{pad}" y="{pad}" width="{size - 2 * pad}" height="{size - 2 * pad}" fill="none" stroke="#444"/>',
    ]
    if line is not None:
        slope, icpt = line
        x0, x1 = -extent, extent
        parts.append(
            f'<line x1="{sx(x0):.2f}" y1="{sy(slope * x0 + icpt):.2f}" x2="{sx(x1):.2f}" '
            f'y2="{sy(slope * x1 + icpt):.2f}" stroke="#222" stroke-dasharray="6,4"/>'
        )
    pts = np.asarray(points, dtype=np.float64)
    ys = pts[:, 1] if pts.shape[1] > 1 else np.zeros(len(pts))
    for xv, yv, c in zip(pts[:, 0], ys, conditions):
        if abs(xv) > extent or abs(yv) > extent:
            continue
        parts.append(_marker(MARKERS[int(c) % len(MARKERS)], sx(xv), sy(yv), color))
    if title:
        parts.append(f'<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{title}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
