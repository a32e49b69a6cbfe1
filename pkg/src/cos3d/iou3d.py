"""Volumetric IoU between oriented boxes.

The exact kernel clips one box's polytope against the six half-spaces of the
other and integrates the volume of the clipped solid with the divergence
theorem.  ``iou3d_oracle`` is an independent Monte-Carlo estimate used to
check it.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .geometry import Box3D, GeometryError

_PLANE_EPS = 1e-12
_MIN_FACE_AREA = 1e-12
_MERGE_EPS = 1e-10
_FAST_PATH_EPS = 1e-9

# corner index = 4*(x>0) + 2*(y>0) + (z>0); each face listed counter-clockwise
# seen from outside
_BOX_FACES = (
    (4, 6, 7, 5), (0, 1, 3, 2),
    (2, 3, 7, 6), (0, 4, 5, 1),
    (1, 5, 7, 3), (0, 2, 6, 4),
)


def box_faces(box: Box3D) -> list[np.ndarray]:
    c = box.corners()
    return [c[list(f)] for f in _BOX_FACES]


def box_halfspaces(box: Box3D) -> list[tuple[np.ndarray, float]]:
    """Six (normal, offset) pairs with the box = {x : normal . x <= offset}."""
    planes = []
    for k in range(3):
        axis = box.rot.matrix[:, k]
        mid = float(axis @ box.center)
        half = box.dims[k] / 2.0
        planes.append((axis, mid + half))
        planes.append((-axis, -mid + half))
    return planes


def _clip_polygon(poly: np.ndarray, dist: np.ndarray):
    """Sutherland-Hodgman against ``dist <= 0``; also returns on-plane points."""
    out, on_plane = [], []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp, dq = dist[i], dist[(i + 1) % n]
        p_in = dp <= _PLANE_EPS
        q_in = dq <= _PLANE_EPS
        if p_in:
            out.append(p)
            if abs(dp) <= _PLANE_EPS:
                on_plane.append(p)
        if p_in != q_in and abs(dp) > _PLANE_EPS and abs(dq) > _PLANE_EPS:
            x = p + (dp / (dp - dq)) * (q - p)
            out.append(x)
            on_plane.append(x)
    return out, on_plane


def _polygon_area_vector(poly: np.ndarray) -> np.ndarray:
    p0 = poly[0]
    return 0.5 * np.cross(poly[1:-1] - p0, poly[2:] - p0).sum(axis=0)


def _dedupe(points: list[np.ndarray]) -> list[np.ndarray]:
    kept: list[np.ndarray] = []
    for p in points:
        if all(np.max(np.abs(p - k)) > _MERGE_EPS for k in kept):
            kept.append(p)
    return kept


def _cap_face(points: list[np.ndarray], normal: np.ndarray) -> Optional[np.ndarray]:
    pts = _dedupe(points)
    if len(pts) < 3:
        return None
    pts = np.array(pts)
    centroid = pts.mean(axis=0)
    # any vector not parallel to the normal seeds the in-plane basis
    seed = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, seed)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    rel = pts - centroid
    order = np.argsort(np.arctan2(rel @ v, rel @ u))
    return pts[order]


def clip_polyhedron(faces: list[np.ndarray], normal: np.ndarray, offset: float) -> list[np.ndarray]:
    """Keep the part of a closed convex polyhedron with ``normal . x <= offset``."""
    new_faces, cap_points = [], []
    has_cap = False
    for face in faces:
        dist = face @ normal - offset
        if np.all(np.abs(dist) <= _PLANE_EPS):
            # coplanar face: it already is the cap, or the solid lies beyond
            if _polygon_area_vector(face) @ normal > 0:
                new_faces.append(face)
                has_cap = True
            continue
        if np.all(dist <= _PLANE_EPS):
            new_faces.append(face)
            cap_points.extend(face[np.abs(dist) <= _PLANE_EPS])
            continue
        if np.all(dist > -_PLANE_EPS):
            # entirely on or beyond the plane; its on-plane points feed the cap
            cap_points.extend(face[np.abs(dist) <= _PLANE_EPS])
            continue
        clipped, on_plane = _clip_polygon(face, dist)
        cap_points.extend(on_plane)
        if len(clipped) >= 3:
            new_faces.append(np.array(clipped))
    if not new_faces:
        return []
    cap = None if has_cap else _cap_face(cap_points, normal)
    if cap is not None:
        new_faces.append(cap)
    return [f for f in new_faces if np.linalg.norm(_polygon_area_vector(f)) >= _MIN_FACE_AREA]


def polyhedron_volume(faces: list[np.ndarray]) -> float:
    vol = 0.0
    for f in faces:
        p0 = f[0]
        vol += float(np.einsum("j,ij->", p0, np.cross(f[1:-1], f[2:])))
    return abs(vol) / 6.0


def intersection_volume(a: Box3D, b: Box3D) -> float:
    faces = box_faces(a)
    for normal, offset in box_halfspaces(b):
        faces = clip_polyhedron(faces, normal, offset)
        if not faces:
            return 0.0
    return polyhedron_volume(faces)


def _shared_axis(a: Box3D, b: Box3D) -> Optional[int]:
    for k in range(3):
        if (abs(abs(a.rot.matrix[k, k]) - 1.0) < _FAST_PATH_EPS
                and abs(abs(b.rot.matrix[k, k]) - 1.0) < _FAST_PATH_EPS):
            return k
    return None


def _footprint(box: Box3D, k: int) -> np.ndarray:
    """Counter-clockwise footprint of the box in the plane normal to axis k."""
    idx = [m for m in range(3) if m != k]
    corners = box.corners()[:, idx]
    center = box.center[idx]
    rel = corners - center
    order = np.argsort(np.arctan2(rel[:, 1], rel[:, 0]))
    pts = corners[order]
    # corners come in duplicate pairs (the two ends along axis k)
    uniq = [pts[0]]
    for p in pts[1:]:
        if np.max(np.abs(p - uniq[-1])) > _MERGE_EPS and np.max(np.abs(p - uniq[0])) > _MERGE_EPS:
            uniq.append(p)
    return np.array(uniq)


def _shoelace(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman intersection of two counter-clockwise convex polygons."""
    out = list(subject)
    n = len(clip)
    for e in range(n):
        if not out:
            break
        a, b = clip[e], clip[(e + 1) % n]
        edge = b - a
        inp, out = out, []

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        for i in range(len(inp)):
            p, q = inp[i], inp[(i + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append(p + t * (q - p))
    return np.array(out) if out else np.zeros((0, 2))


def intersection_volume_shared_axis(a: Box3D, b: Box3D, k: int) -> float:
    """Footprint polygon overlap times extent overlap along a shared axis."""
    lo = max(a.center[k] - a.dims[k] / 2.0, b.center[k] - b.dims[k] / 2.0)
    hi = min(a.center[k] + a.dims[k] / 2.0, b.center[k] + b.dims[k] / 2.0)
    if hi <= lo:
        return 0.0
    inter = clip_convex_polygon(_footprint(a, k), _footprint(b, k))
    return _shoelace(inter) * (hi - lo)


def iou3d_exact(a: Box3D, b: Box3D, fast_path: bool = True) -> float:
    va, vb = a.volume, b.volume
    if va <= 0.0 or vb <= 0.0:
        raise GeometryError("IoU needs boxes with positive volume")
    k = _shared_axis(a, b) if fast_path else None
    if k is not None:
        inter = intersection_volume_shared_axis(a, b, k)
    else:
        inter = intersection_volume(a, b)
    inter = min(max(inter, 0.0), min(va, vb))
    return min(1.0, max(0.0, inter / (va + vb - inter)))


def _inside(cols, box: Box3D) -> np.ndarray:
    """Membership of sample points (given as x/y/z columns) in an oriented box."""
    R = box.rot.matrix
    offset = box.center @ R
    mask = None
    for k in range(3):
        local = cols[0] * np.float32(R[0, k])
        local += cols[1] * np.float32(R[1, k])
        local += cols[2] * np.float32(R[2, k])
        local -= np.float32(offset[k])
        np.abs(local, out=local)
        mk = local <= np.float32(box.dims[k] / 2.0)
        mask = mk if mask is None else mask & mk
    return mask


def iou3d_oracle(a: Box3D, b: Box3D, samples: int = 1_000_000, seed: int = 0,
                 chunk: int = 500_000) -> float:
    """Monte-Carlo IoU from uniform samples in the joint bounding box."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    corners = np.concatenate([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    both = either = 0
    left = samples
    while left > 0:
        n = min(chunk, left)
        cols = [np.float32(lo[k]) + rng.random(n, dtype=np.float32) * np.float32(hi[k] - lo[k])
                for k in range(3)]
        ia, ib = _inside(cols, a), _inside(cols, b)
        both += int(np.count_nonzero(ia & ib))
        either += int(np.count_nonzero(ia | ib))
        left -= n
    return both / either if either else 0.0


def iou2d(a: Sequence[float], b: Sequence[float]) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, ix) * max(0.0, iy)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0
