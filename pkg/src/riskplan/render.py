"""Static risk-map figures as binary PPM and SVG, with no imaging dependencies.

Image rows run top-down from the grid's maximum ``y``; each cell is a
``scale x scale`` pixel block.  Heat-map colors use a black-red-yellow-white
ramp over the map normalized to its own min and max.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .grid import GridSpec

PLANNED_COLOR = (0, 200, 255)
TRUTH_COLOR = (0, 230, 0)
OCCUPIED_COLOR = (160, 160, 160)


def normalize(grid: np.ndarray) -> tuple[np.ndarray, float, float]:
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    if hi - lo <= 0.0:
        return np.zeros_like(g), lo, hi
    return (g - lo) / (hi - lo), lo, hi


def heat_colors(t: np.ndarray) -> np.ndarray:
    """``[0, 1] -> uint8 RGB`` on a black-red-yellow-white ramp."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([3 * t, 3 * t - 1, 3 * t - 2], axis=-1)
    return np.rint(255 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)


def render_heatmap(grid: np.ndarray, scale: int = 4) -> np.ndarray:
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ShapeError(f"heat map needs an H x W grid, got shape {g.shape}")
    colors = heat_colors(normalize(g)[0])[::-1]
    return np.repeat(np.repeat(colors, scale, axis=0), scale, axis=1)


def pixel_to_cell(py: int, px: int, shape: tuple[int, int], scale: int) -> tuple[int, int]:
    return shape[0] - 1 - py // scale, px // scale


def world_to_pixel(x: float, y: float, spec: GridSpec, scale: int) -> tuple[float, float]:
    """Continuous ``(row, col)`` pixel coordinates of a world point."""
    col = (x - spec.x_range[0]) / spec.cell_size * scale
    row = (spec.height - (y - spec.y_range[0]) / spec.cell_size) * scale
    return row, col


def _draw_line(img: np.ndarray, p0, p1, color) -> None:
    (r0, c0), (r1, c1) = p0, p1
    n = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
    rows = np.rint(np.linspace(r0, r1, n + 1)).astype(int)
    cols = np.rint(np.linspace(c0, c1, n + 1)).astype(int)
    ok = (rows >= 0) & (rows < img.shape[0]) & (cols >= 0) & (cols < img.shape[1])
    img[rows[ok], cols[ok]] = color


def _draw_path(img, poses, spec, scale, color) -> None:
    pts = [world_to_pixel(x, y, spec, scale) for x, y in np.asarray(poses)[:, :2]]
    for a, b in zip(pts[:-1], pts[1:]):
        _draw_line(img, a, b, color)


def compose(risk: np.ndarray, spec: GridSpec, occupancy: np.ndarray | None = None,
            planned: Sequence[np.ndarray] = (), truth: Sequence[np.ndarray] = (), scale: int = 4) -> np.ndarray:
    """Heat map with occupied cells greyed in and trajectory polylines on top."""
    img = render_heatmap(risk, scale).copy()
    if occupancy is not None:
        mask = np.repeat(np.repeat(np.asarray(occupancy)[::-1] > 0, scale, axis=0), scale, axis=1)
        img[mask] = (img[mask].astype(np.uint16) + OCCUPIED_COLOR) // 2
    for poses in truth:
        _draw_path(img, poses, spec, scale, TRUTH_COLOR)
    for poses in planned:
        _draw_path(img, poses, spec, scale, PLANNED_COLOR)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ShapeError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def _hex(c) -> str:
    return "#%02x%02x%02x" % tuple(int(v) for v in c)


def _runs(row: np.ndarray):
    start = 0
    for i in range(1, len(row) + 1):
        if i == len(row) or not np.array_equal(row[i], row[start]):
            yield start, i - start, row[start]
            start = i


def svg_document(risk: np.ndarray, spec: GridSpec, occupancy: np.ndarray | None = None,
                 planned: Sequence[np.ndarray] = (), truth: Sequence[np.ndarray] = (), scale: int = 4,
                 title: str = "risk map") -> str:
    """Vector version of :func:`compose`; same-colored cells in a row merge into one rect."""
    h, w = np.shape(risk)
    t, lo, hi = normalize(risk)
    colors = heat_colors(t)[::-1]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * scale}" height="{h * scale}" '
           f'viewBox="0 0 {w * scale} {h * scale}">',
           f"<title>{title}</title>",
           f'<desc>color scale: per-map min-max normalization; min={lo!r} max={hi!r}</desc>',
           '<g shape-rendering="crispEdges">']
    for r in range(h):
        for c0, n, col in _runs(colors[r]):
            out.append(f'<rect x="{c0 * scale}" y="{r * scale}" width="{n * scale}" height="{scale}" '
                       f'fill="{_hex(col)}"/>')
    out.append("</g>")
    if occupancy is not None:
        occ = (np.asarray(occupancy)[::-1] > 0)
        out.append(f'<g fill="{_hex(OCCUPIED_COLOR)}" fill-opacity="0.5">')
        for r in range(h):
            for c0, n, v in _runs(occ[r]):
                if v:
                    out.append(f'<rect x="{c0 * scale}" y="{r * scale}" width="{n * scale}" height="{scale}"/>')
        out.append("</g>")
    for group, color in ((truth, TRUTH_COLOR), (planned, PLANNED_COLOR)):
        for poses in group:
            pts = " ".join("%.2f,%.2f" % world_to_pixel(x, y, spec, scale)[::-1] for x, y in np.asarray(poses)[:, :2])
            out.append(f'<polyline points="{pts}" fill="none" stroke="{_hex(color)}" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, *args, **kwargs) -> None:
    Path(path).write_text(svg_document(*args, **kwargs), encoding="utf-8")
