"""Camera-frame box types, rotation views and pinhole projection.

Conventions: right-handed camera frame with +X right, +Y down, +Z forward
(optical axis).  A box's local x/y/z axes carry its width/height/length, so the
eight corners are ``center + R @ (+-W/2, +-H/2, +-L/2)``.  "Yaw" is rotation
about the camera Y axis, which is the up axis for upright scenes.
"""

from __future__ import annotations

import enum
import math
import warnings
from functools import cached_property
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


Z_NEAR = 1e-3
_GIMBAL_EPS = 1e-12
_ORTHO_TOL = 1e-3
TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Invalid geometric input."""


class BehindCameraError(GeometryError):
    """Every corner of the box lies at or behind the near plane."""


def wrap_angle(a: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    w = math.fmod(a + math.pi, TWO_PI)
    if w < 0:
        w += TWO_PI
    w -= math.pi
    # fmod can land exactly on +pi through round-off
    if w >= math.pi:
        w -= TWO_PI
    return w


def angle_to_unit(a: float) -> float:
    return (wrap_angle(a) + math.pi) / TWO_PI


def unit_to_angle(u: float) -> float:
    return wrap_angle(u * TWO_PI - math.pi)


def trig_to_unit(v: float) -> float:
    return (v + 1.0) / 2.0


def sincos_unit_to_angle(s_unit: float, c_unit: float) -> float:
    return wrap_angle(math.atan2(2.0 * s_unit - 1.0, 2.0 * c_unit - 1.0))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"{name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be at least 1x1")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            warnings.warn(
                f"principal point ({self.cx}, {self.cy}) lies outside the "
                f"{self.width}x{self.height} image",
                stacklevel=3,
            )

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float).reshape(3, 3)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]),
                   int(width), int(height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def euler_zyx_from_matrix(m: np.ndarray) -> tuple[float, float, float]:
    """Decompose ``m = Rz(z) @ Ry(y) @ Rx(x)`` into ``(z, y, x)``.

    At gimbal lock (|y| = pi/2) z is set to 0 and x absorbs the remaining
    rotation.
    """
    m = np.asarray(m, dtype=float)
    sy = -m[2, 0]
    cy = math.hypot(m[0, 0], m[1, 0])
    y = math.atan2(sy, cy)
    if cy > _GIMBAL_EPS:
        z = math.atan2(m[1, 0], m[0, 0])
        x = math.atan2(m[2, 1], m[2, 2])
    else:
        z = 0.0
        x = math.atan2(-m[1, 2], m[1, 1])
    return wrap_angle(z), wrap_angle(y), wrap_angle(x)


@dataclass(frozen=True, eq=False)
class Rotation:
    """Orientation of a box in the camera frame.

    ``angles`` caches the ZYX Euler angles when the rotation was built from
    them, so the Euler views reproduce those angles exactly instead of
    re-deriving them from the matrix.
    """

    matrix: np.ndarray
    angles: Optional[tuple[float, float, float]] = field(default=None, repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise GeometryError("rotation matrix must be finite")
        if not (np.allclose(m.T @ m, np.eye(3), atol=_ORTHO_TOL)
                and abs(np.linalg.det(m) - 1.0) <= _ORTHO_TOL):
            raise GeometryError("rotation matrix must be orthonormal with det +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls.from_euler_zyx(0.0, 0.0, 0.0)

    @classmethod
    def from_euler_zyx(cls, z: float, y: float, x: float) -> "Rotation":
        if not all(math.isfinite(a) for a in (z, y, x)):
            raise GeometryError("Euler angles must be finite")
        z, y, x = wrap_angle(z), wrap_angle(y), wrap_angle(x)
        return cls(_rz(z) @ _ry(y) @ _rx(x), angles=(z, y, x))

    @classmethod
    def from_yaw(cls, yaw: float) -> "Rotation":
        """Rotation about the camera Y (up) axis."""
        if not math.isfinite(yaw):
            raise GeometryError("yaw must be finite")
        return cls(_ry(wrap_angle(yaw)))

    @classmethod
    def from_euler_unit(cls, units: Sequence[float]) -> "Rotation":
        return cls.from_euler_zyx(*(unit_to_angle(u) for u in units))

    @classmethod
    def from_sincos_unit(cls, values: Sequence[float]) -> "Rotation":
        v = list(values)
        return cls.from_euler_zyx(*(sincos_unit_to_angle(v[2 * k], v[2 * k + 1])
                                    for k in range(3)))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        k = np.array([[0.0, -axis[2], axis[1]],
                      [axis[2], 0.0, -axis[0]],
                      [-axis[1], axis[0], 0.0]])
        return cls(np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k))

    @property
    def euler_zyx(self) -> tuple[float, float, float]:
        if self.angles is None:
            # the matrix is immutable, so the derived angles can be memoized
            object.__setattr__(self, "angles", euler_zyx_from_matrix(self.matrix))
        return self.angles

    @cached_property
    def euler_unit(self) -> tuple[float, float, float]:
        return tuple(angle_to_unit(a) for a in self.euler_zyx)

    @cached_property
    def sincos_unit(self) -> tuple[float, ...]:
        """``(sin z, cos z, sin y, cos y, sin x, cos x)`` mapped to [0, 1]."""
        out = []
        for a in self.euler_zyx:
            out += [trig_to_unit(math.sin(a)), trig_to_unit(math.cos(a))]
        return tuple(out)

    @property
    def yaw(self) -> float:
        """Heading about the camera Y axis (exact for upright rotations)."""
        m = self.matrix
        return wrap_angle(math.atan2(m[0, 2], m[0, 0]))

    def is_orthonormal(self, tol: float = 1e-6) -> bool:
        m = self.matrix
        return (np.allclose(m.T @ m, np.eye(3), atol=tol)
                and abs(np.linalg.det(m) - 1.0) <= tol)


@dataclass(frozen=True, eq=False)
class Box3D:
    center: np.ndarray
    dims: np.ndarray  # (W, H, L)
    rot: Rotation

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        d = np.asarray(self.dims, dtype=float).reshape(3)
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(d))):
            raise GeometryError("box center and dims must be finite")
        if np.any(d < 0):
            raise GeometryError("box dims must be non-negative")
        c.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    def corners(self) -> np.ndarray:
        """(8, 3) corners; index bit 2/1/0 selects the sign along local x/y/z."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=float)
        local = signs * (self.dims / 2.0)
        return self.center + local @ self.rot.matrix.T


def quantize_coord(v: float, extent: float) -> int:
    s = v * 1000.0 / extent
    q = math.floor(abs(s) + 0.5)
    q = q if s >= 0 else -q
    return int(min(1000, max(0, q)))


def quantize2d(pixel: Sequence[float], cam: CameraIntrinsics) -> tuple[int, int, int, int]:
    """Pixel rectangle to integers in [0, 1000] (round half away from zero)."""
    x1, y1, x2, y2 = pixel
    return (quantize_coord(x1, cam.width), quantize_coord(y1, cam.height),
            quantize_coord(x2, cam.width), quantize_coord(y2, cam.height))


def dequantize2d(norm: Sequence[float], cam: CameraIntrinsics) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = norm
    return (x1 * cam.width / 1000.0, y1 * cam.height / 1000.0,
            x2 * cam.width / 1000.0, y2 * cam.height / 1000.0)


@dataclass(frozen=True)
class Box2D:
    pixel: tuple[float, float, float, float]
    norm: tuple[int, int, int, int]

    @classmethod
    def from_pixel(cls, pixel: Sequence[float], cam: CameraIntrinsics) -> "Box2D":
        x1, y1, x2, y2 = (float(v) for v in pixel)
        if x1 > x2 or y1 > y2:
            raise GeometryError(f"inverted 2D box {pixel}")
        return cls((x1, y1, x2, y2), quantize2d((x1, y1, x2, y2), cam))


def rect_area(r: Sequence[float]) -> float:
    return max(0.0, r[2] - r[0]) * max(0.0, r[3] - r[1])


def clip_rect(r: Sequence[float], width: float, height: float) -> tuple[float, float, float, float]:
    x1 = min(max(r[0], 0.0), width)
    y1 = min(max(r[1], 0.0), height)
    x2 = min(max(r[2], 0.0), width)
    y2 = min(max(r[3], 0.0), height)
    return (x1, y1, x2, y2)


# corner index pairs differing in exactly one bit
_EDGES = [(i, i ^ b) for i in range(8) for b in (1, 2, 4) if i < i ^ b]


def _front_points(corners: np.ndarray, z_near: float) -> np.ndarray:
    """Corners in front of the near plane plus edge crossings of that plane."""
    z = corners[:, 2]
    pts = [corners[z > z_near]]
    for i, j in _EDGES:
        zi, zj = z[i], z[j]
        if (zi > z_near) != (zj > z_near):
            t = (z_near - zi) / (zj - zi)
            pts.append((corners[i] + t * (corners[j] - corners[i]))[None, :])
    return np.concatenate(pts, axis=0)


@dataclass(frozen=True)
class Projection:
    clipped: tuple[float, float, float, float]
    unclipped: tuple[float, float, float, float]

    def box2d(self, cam: CameraIntrinsics) -> Box2D:
        return Box2D.from_pixel(self.clipped, cam)


def project_points(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    u = cam.fx * points[:, 0] / points[:, 2] + cam.cx
    v = cam.fy * points[:, 1] / points[:, 2] + cam.cy
    return np.stack([u, v], axis=1)


def project_box(box: Box3D, cam: CameraIntrinsics, z_near: float = Z_NEAR) -> Projection:
    """Axis-aligned hull of the projected cuboid, clipped and unclipped.

    Corners behind the near plane are replaced by the points where the box
    edges cross it, so partially-behind boxes do not flip sign.
    """
    corners = box.corners()
    if not np.any(corners[:, 2] > z_near):
        raise BehindCameraError("all corners are behind the camera")
    uv = project_points(_front_points(corners, z_near), cam)
    hull = (float(uv[:, 0].min()), float(uv[:, 1].min()),
            float(uv[:, 0].max()), float(uv[:, 1].max()))
    return Projection(clip_rect(hull, cam.width, cam.height), hull)


class FrustumStatus(enum.Enum):
    INSIDE = "Inside"
    PARTIALLY_OUTSIDE = "PartiallyOutside"
    FULLY_OUTSIDE = "FullyOutside"
    BEHIND_CAMERA = "BehindCamera"


def _status_of_hull(hull, cam: CameraIntrinsics) -> FrustumStatus:
    x1, y1, x2, y2 = hull
    W, H = cam.width, cam.height
    if x1 >= 0 and y1 >= 0 and x2 <= W and y2 <= H:
        return FrustumStatus.INSIDE
    if x2 <= 0 or y2 <= 0 or x1 >= W or y1 >= H:
        return FrustumStatus.FULLY_OUTSIDE
    return FrustumStatus.PARTIALLY_OUTSIDE


def frustum_status(box: Box3D, cam: CameraIntrinsics, z_near: float = Z_NEAR) -> FrustumStatus:
    if not np.any(box.corners()[:, 2] > z_near):
        return FrustumStatus.BEHIND_CAMERA
    return _status_of_hull(project_box(box, cam, z_near).unclipped, cam)


def truncation_estimate(box: Box3D, cam: CameraIntrinsics, z_near: float = Z_NEAR) -> float:
    """Fraction of the projected hull cut away by the image borders."""
    proj = project_box(box, cam, z_near)
    full = rect_area(proj.unclipped)
    if full <= 0.0:
        status = _status_of_hull(proj.unclipped, cam)
        return 0.0 if status is FrustumStatus.INSIDE else 1.0
    status = _status_of_hull(proj.unclipped, cam)
    if status is FrustumStatus.INSIDE:
        return 0.0
    if status is FrustumStatus.FULLY_OUTSIDE:
        return 1.0
    return min(1.0, max(0.0, 1.0 - rect_area(proj.clipped) / full))


def union_area(rects: Iterable[Sequence[float]]) -> float:
    """Exact area of a union of axis-aligned rectangles (coordinate sweep)."""
    rects = [r for r in rects if r[2] > r[0] and r[3] > r[1]]
    if not rects:
        return 0.0
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    area = 0.0
    for xa, xb in zip(xs[:-1], xs[1:]):
        spans = sorted((r[1], r[3]) for r in rects if r[0] <= xa and r[2] >= xb)
        covered = 0.0
        cur_lo = cur_hi = None
        for lo, hi in spans:
            if cur_hi is None or lo > cur_hi:
                if cur_hi is not None:
                    covered += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        if cur_hi is not None:
            covered += cur_hi - cur_lo
        area += covered * (xb - xa)
    return area


def depth_of(box: Box3D, mode: str = "z") -> float:
    """Depth used for near-to-far ordering: center Z, or Euclidean range."""
    if mode == "z":
        return float(box.center[2])
    if mode == "euclidean":
        return float(np.linalg.norm(box.center))
    raise ValueError(f"unknown depth mode {mode!r}")


def visibility_estimate(target: tuple[Box3D, Sequence[float]],
                        occluders: Iterable[tuple[Box3D, Sequence[float]]],
                        depth_mode: str = "z") -> float:
    """Share of the target's 2D box not covered by strictly nearer boxes."""
    box, rect = target
    area = rect_area(rect)
    if area <= 0.0:
        return 1.0
    d = depth_of(box, depth_mode)
    pieces = []
    for obox, orect in occluders:
        if depth_of(obox, depth_mode) >= d:
            continue
        ix1, iy1 = max(rect[0], orect[0]), max(rect[1], orect[1])
        ix2, iy2 = min(rect[2], orect[2]), min(rect[3], orect[3])
        if ix2 > ix1 and iy2 > iy1:
            pieces.append((ix1, iy1, ix2, iy2))
    covered = union_area(pieces)
    return min(1.0, max(0.0, 1.0 - covered / area))
