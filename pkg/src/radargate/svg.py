"""Plot data and a plain SVG 1.1 figure for expert outputs before/after rotation."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .geometry import cone_project
from .layer import RadarLayer, forward
from .numkernel import pca_2d

WIDTH, HEIGHT = 800, 400
COLORS = {"v": "#1f77b4", "v_tilde": "#d62728", "target": "#2ca02c", "projection": "#7f7f7f"}


def cone_plot_data(layer: RadarLayer, x, target) -> dict:
    """PCA-2D coordinates of v_i, v~_i, the target offset and its hull projection.

    ``target`` is a full layer output; x W is removed before projecting.  All
    points share one PCA basis, so v~_i lands on v_i whenever theta_r = 0.
    """
    trace = forward(layer, x)
    v = trace.v
    vt = trace.v_tilde
    delta = np.asarray(target, dtype=np.float64) - trace.base_out
    proj = cone_project(delta, v)
    n = v.shape[0]
    cloud = np.vstack([v, vt, delta[None], proj.point[None]])
    xy = pca_2d(cloud)
    return {
        "v": xy[:n],
        "v_tilde": xy[n:2 * n],
        "target": xy[2 * n],
        "projection": xy[2 * n + 1],
        "base_distance": proj.distance,
    }


def polar(xy) -> np.ndarray:
    """(angle, radius) per row."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    return np.column_stack([np.arctan2(xy[:, 1], xy[:, 0]), np.hypot(xy[:, 0], xy[:, 1])])


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _panel_scale(points, half: float) -> float:
    extent = float(np.abs(points).max()) if points.size else 0.0
    return 0.85 * half / extent if extent > 0 else 1.0


def render_svg(data: dict, title: str = "expert outputs") -> str:
    keys = ("v", "v_tilde", "target", "projection")
    series = {k: np.atleast_2d(np.asarray(data[k], dtype=np.float64)) for k in keys}
    allpts = np.vstack([series[k] for k in keys])
    half = HEIGHT / 2 - 30
    scale = _panel_scale(allpts, half)
    radii = polar(allpts)[:, 1]
    rmax = float(radii.max()) if radii.size and radii.max() > 0 else 1.0

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f"<title>{escape(title)}</title>",
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    # left panel: Cartesian PCA plane
    cx, cy = WIDTH / 4, HEIGHT / 2
    out.append(f'<g id="cartesian"><line x1="{_fmt(cx - half)}" y1="{_fmt(cy)}" x2="{_fmt(cx + half)}" '
               f'y2="{_fmt(cy)}" stroke="#cccccc"/><line x1="{_fmt(cx)}" y1="{_fmt(cy - half)}" '
               f'x2="{_fmt(cx)}" y2="{_fmt(cy + half)}" stroke="#cccccc"/>')
    v = series["v"]
    if v.shape[0] > 1:
        pts = " ".join(f"{_fmt(cx + scale * a)},{_fmt(cy - scale * b)}" for a, b in v)
        out.append(f'<polygon points="{pts}" fill="{COLORS["v"]}" fill-opacity="0.1" stroke="{COLORS["v"]}"/>')
    for key in keys:
        for a, b in series[key]:
            out.append(f'<circle class="{key}" cx="{_fmt(cx + scale * a)}" cy="{_fmt(cy - scale * b)}" '
                       f'r="4" fill="{COLORS[key]}"/>')
    out.append("</g>")
    # right panel: polar view (angle, radius / max radius)
    px = 3 * WIDTH / 4
    out.append('<g id="polar">')
    for frac in (0.5, 1.0):
        out.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(cy)}" r="{_fmt(frac * half)}" fill="none" stroke="#cccccc"/>')
    for key in keys:
        for ang, rad in polar(series[key]):
            rr = half * rad / rmax
            x1, y1 = px + rr * math.cos(ang), cy - rr * math.sin(ang)
            out.append(f'<line class="{key}" x1="{_fmt(px)}" y1="{_fmt(cy)}" x2="{_fmt(x1)}" y2="{_fmt(y1)}" '
                       f'stroke="{COLORS[key]}" stroke-opacity="0.5"/>')
            out.append(f'<circle class="{key}" cx="{_fmt(x1)}" cy="{_fmt(y1)}" r="3" fill="{COLORS[key]}"/>')
    out.append("</g>")
    for i, key in enumerate(keys):
        out.append(f'<text x="{10 + 110 * i}" y="{HEIGHT - 10}" font-size="12" fill="{COLORS[key]}">'
                   f"{escape(key)}</text>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
