"""Bird's-eye-view footprints (camera X right, Z forward) and a plain SVG plot."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import Box3D


def bev_polygon(box: Box3D) -> list[tuple[float, float]]:
    """Counter-clockwise (x, z) hull of the box corners dropped onto the ground plane."""
    pts = box.corners()[:, [0, 2]]
    try:
        hull = ConvexHull(pts)
        ring = pts[hull.vertices]
    except QhullError:  # flat box seen edge-on from above
        c = pts.mean(axis=0)
        ring = pts[np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))]
    return [(float(x), float(z)) for x, z in ring]


def scene_bev(objects: Sequence[tuple[str, Box3D]]) -> list[dict]:
    return [{"category": cat, "polygon": [[round(x, 4), round(z, 4)] for x, z in bev_polygon(box)]}
            for cat, box in objects]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b")


def render_svg(polygons: list[dict], px_per_m: float = 20.0, margin_m: float = 2.0) -> str:
    """SVG with a 1 m grid; the camera sits at the origin looking up the page."""
    xs = [0.0] + [p[0] for o in polygons for p in o["polygon"]]
    zs = [0.0] + [p[1] for o in polygons for p in o["polygon"]]
    x0 = math.floor(min(xs) - margin_m)
    x1 = math.ceil(max(xs) + margin_m)
    z0 = math.floor(min(zs) - margin_m)
    z1 = math.ceil(max(zs) + margin_m)
    w, h = (x1 - x0) * px_per_m, (z1 - z0) * px_per_m

    def sx(x):
        return (x - x0) * px_per_m

    def sz(z):
        return (z1 - z) * px_per_m

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
           f'viewBox="0 0 {w:.0f} {h:.0f}">',
           f'<rect width="{w:.0f}" height="{h:.0f}" fill="white"/>',
           '<g stroke="#dddddd" stroke-width="1">']
    for gx in range(x0, x1 + 1):
        out.append(f'<line x1="{sx(gx):.1f}" y1="0" x2="{sx(gx):.1f}" y2="{h:.0f}"/>')
    for gz in range(z0, z1 + 1):
        out.append(f'<line x1="0" y1="{sz(gz):.1f}" x2="{w:.0f}" y2="{sz(gz):.1f}"/>')
    out.append("</g>")
    cats = sorted({o["category"] for o in polygons})
    color = {c: _PALETTE[i % len(_PALETTE)] for i, c in enumerate(cats)}
    for o in polygons:
        pts = " ".join(f"{sx(x):.1f},{sz(z):.1f}" for x, z in o["polygon"])
        out.append(f'<polygon points="{pts}" fill="none" stroke="{color[o["category"]]}" '
                   f'stroke-width="2"><title>{escape(o["category"])}</title></polygon>')
    out.append(f'<circle cx="{sx(0):.1f}" cy="{sz(0):.1f}" r="4" fill="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
