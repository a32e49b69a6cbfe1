import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection

from cos3d.geometry import Box3D, GeometryError, Rotation
from cos3d.iou3d import (
    box_halfspaces,
    clip_convex_polygon,
    intersection_volume,
    intersection_volume_shared_axis,
    iou2d,
    iou3d_exact,
    iou3d_oracle,
    polyhedron_volume,
    box_faces,
)

from conftest import random_rotation, unit_cube


def qhull_intersection_volume(a: Box3D, b: Box3D) -> float:
    """Independent exact reference: qhull over the 12 half-spaces of both boxes."""
    planes = box_halfspaces(a) + box_halfspaces(b)
    A = np.array([n for n, _ in planes])
    d = np.array([o for _, o in planes])
    norms = np.linalg.norm(A, axis=1)
    # Chebyshev center: maximize r subject to A x + r |n| <= d
    res = linprog([0, 0, 0, -1], A_ub=np.c_[A, norms], b_ub=d,
                  bounds=[(None, None)] * 3 + [(0, None)], method="highs")
    if not res.success or res.x[3] < 1e-7:
        return 0.0
    hs = HalfspaceIntersection(np.c_[A, -d], res.x[:3])
    return float(ConvexHull(hs.intersections).volume)


def random_box(rng, lo=0.2, hi=5.0, spread=3.0) -> Box3D:
    return Box3D(rng.uniform(-spread, spread, 3), rng.uniform(lo, hi, 3), random_rotation(rng))


def rigid(box: Box3D, R: np.ndarray, t: np.ndarray) -> Box3D:
    return Box3D(R @ box.center + t, box.dims, Rotation(R @ box.rot.matrix))


class TestExact:
    def test_identical(self):
        a = Box3D([1, 2, 9], [1.5, 2, 3], Rotation.from_euler_zyx(0.3, 0.2, -0.4))
        assert iou3d_exact(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert iou3d_exact(unit_cube(0, 0, 0), unit_cube(10, 0, 0)) == 0.0

    def test_offset_half(self):
        assert iou3d_exact(unit_cube(0, 0, 0), unit_cube(0.5, 0, 0)) == pytest.approx(1 / 3, abs=1e-9)

    def test_offset_half_general_path(self):
        iou = iou3d_exact(unit_cube(0, 0, 0), unit_cube(0.5, 0, 0), fast_path=False)
        assert iou == pytest.approx(1 / 3, abs=1e-9)

    def test_yaw45_closed_form(self):
        # octagon of area 2(sqrt 2 - 1) over the square of area 1
        a, b = unit_cube(), unit_cube(yaw=math.pi / 4)
        inter = 2 * (math.sqrt(2) - 1)
        expected = inter / (2 - inter)
        assert iou3d_exact(a, b) == pytest.approx(expected, abs=1e-9)
        assert iou3d_exact(a, b, fast_path=False) == pytest.approx(expected, abs=1e-9)

    def test_yaw45_vs_oracle(self):
        a, b = unit_cube(), unit_cube(yaw=math.pi / 4)
        assert abs(iou3d_exact(a, b) - iou3d_oracle(a, b, 1_000_000, seed=5)) < 2e-3

    def test_zero_volume_rejected(self):
        flat = Box3D([0, 0, 0], [1, 0, 1], Rotation.identity())
        with pytest.raises(GeometryError):
            iou3d_exact(flat, unit_cube())

    def test_touching_faces(self):
        assert iou3d_exact(unit_cube(0, 0, 0), unit_cube(1.0, 0, 0)) == pytest.approx(0.0, abs=1e-12)

    def test_containment(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            rot = random_rotation(rng)
            outer = Box3D([1, -1, 4], [3, 2, 4], rot)
            inner = Box3D([1, -1, 4], rng.uniform(0.1, 1.9, 3), rot)
            assert iou3d_exact(inner, outer) == pytest.approx(inner.volume / outer.volume, abs=1e-6)

    def test_coplanar_faces_counted_once(self):
        a = Box3D([0, 0, 0], [2, 1, 1], Rotation.identity())
        b = Box3D([0.5, 0, 0], [1, 1, 1], Rotation.identity())
        assert intersection_volume(a, b) == pytest.approx(1.0, abs=1e-12)


class TestAgainstQhull:
    def test_random_pairs(self):
        rng = np.random.default_rng(2024)
        for _ in range(300):
            a = random_box(rng)
            b = random_box(rng)
            ref = qhull_intersection_volume(a, b)
            assert intersection_volume(a, b) == pytest.approx(ref, abs=1e-7 * max(1.0, ref))

    def test_polyhedron_volume_of_box(self):
        rng = np.random.default_rng(1)
        box = random_box(rng)
        assert polyhedron_volume(box_faces(box)) == pytest.approx(box.volume, rel=1e-12)


class TestProperties:
    def test_symmetry(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            assert abs(iou3d_exact(a, b) - iou3d_exact(b, a)) < 1e-9

    def test_rigid_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            R = random_rotation(rng).matrix
            t = rng.uniform(-20, 20, 3)
            assert abs(iou3d_exact(a, b) - iou3d_exact(rigid(a, R, t), rigid(b, R, t))) < 1e-6

    @settings(max_examples=150, deadline=None)
    @given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi),
           st.floats(-2, 2), st.floats(-1, 1), st.floats(-2, 2),
           st.floats(0.2, 4), st.floats(0.2, 4), st.floats(0.2, 4))
    def test_fast_path_matches_general(self, ya, yb, dx, dy, dz, w, h, l):
        a = Box3D([0, 0, 10], [1.5, 1.2, 3.0], Rotation.from_yaw(ya))
        b = Box3D([dx, dy, 10 + dz], [w, h, l], Rotation.from_yaw(yb))
        fast = intersection_volume_shared_axis(a, b, 1)
        general = intersection_volume(a, b)
        assert abs(fast - general) < 1e-9

    def test_shared_camera_z_axis(self):
        a = Box3D([0, 0, 10], [1, 2, 3], Rotation.from_euler_zyx(0.4, 0, 0))
        b = Box3D([0.3, 0.1, 10.5], [2, 1, 1], Rotation.from_euler_zyx(-0.9, 0, 0))
        assert iou3d_exact(a, b) == pytest.approx(iou3d_exact(a, b, fast_path=False), abs=1e-9)

    def test_bounded(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            v = iou3d_exact(random_box(rng), random_box(rng))
            assert 0.0 <= v <= 1.0


class TestOracle:
    def test_identical_exact_one(self):
        for seed in range(3):
            assert iou3d_oracle(unit_cube(), unit_cube(), 10_000, seed=seed) == 1.0

    def test_disjoint(self):
        assert iou3d_oracle(unit_cube(), unit_cube(10, 0, 0), 10_000) == 0.0

    def test_offset_half(self):
        v = iou3d_oracle(unit_cube(), unit_cube(0.5, 0, 0), 1_000_000, seed=1)
        assert abs(v - 1 / 3) < 2e-3

    def test_deterministic(self):
        a, b = unit_cube(), unit_cube(0.3, 0.2, 0.1, yaw=0.5)
        assert iou3d_oracle(a, b, 50_000, seed=4) == iou3d_oracle(a, b, 50_000, seed=4)


class TestIoU2D:
    @pytest.mark.parametrize("a, b, expected", [
        ((0, 0, 10, 10), (0, 0, 10, 10), 1.0),
        ((0, 0, 10, 10), (20, 20, 30, 30), 0.0),
        ((0, 0, 10, 10), (5, 0, 15, 10), 1 / 3),
    ])
    def test_cases(self, a, b, expected):
        assert iou2d(a, b) == pytest.approx(expected)


def test_clip_convex_polygon_square_overlap():
    sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], dtype=float)
    out = clip_convex_polygon(sq, sq + 1.0)
    x, y = out[:, 0], out[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    assert area == pytest.approx(1.0)
