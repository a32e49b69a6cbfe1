import json
import math

import numpy as np
import pytest

from cos3d.curation import (
    BEHIND_CAMERA,
    FULLY_OUTSIDE,
    HIGH_TRUNCATION,
    LOW_VISIBILITY,
    RawImage,
    RawInstance,
    UnknownAdapterError,
    canonical_line_from_dict,
    canonical_line_to_json,
    drop_reason,
    ingest,
    normalize,
    prepare_records,
    process_image,
    snap_rotation,
)
from cos3d.curation.adapters import nuscenes_box, parse_kitti_calib, parse_kitti_label_line
from cos3d.geometry import Box3D, CameraIntrinsics, Rotation

from conftest import make_record


def serialize(results) -> str:
    return "".join(canonical_line_to_json(l) + "\n" for r in results for l in r.lines)


def raw(center, category="car", vis=None, trunc=None, sid="0", yaw=0.0, dims=(1.8, 1.5, 4.2)):
    return RawInstance(category, Box3D(center, dims, Rotation.from_yaw(yaw)), sid,
                       visibility=vis, truncation=trunc)


@pytest.fixture
def cam():
    return CameraIntrinsics(1266.4, 1266.4, 816.3, 491.5, 1600, 900)


class TestSyntheticAdapter:
    def test_two_images(self, tmp_path, fixture_path):
        lines = fixture_path.read_text().splitlines()[:2]
        p = tmp_path / "two.jsonl"
        p.write_text("\n".join(lines) + "\n")
        assert len(list(ingest("synthetic", p))) == 2

    def test_corrupt_line(self, tmp_path, fixture_path):
        lines = fixture_path.read_text().splitlines()[:3]
        lines.insert(1, '{"image_path": "broken", ')
        p = tmp_path / "bad.jsonl"
        p.write_text("\n".join(lines) + "\n")
        diags = []
        images = list(ingest("synthetic", p, diags))
        assert len(images) == 3
        assert len(diags) == 1 and diags[0].line == 2

    def test_unknown_adapter(self):
        with pytest.raises(UnknownAdapterError):
            ingest("coco", "x")


class TestKitti:
    LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"

    def test_field_mapping(self):
        inst = parse_kitti_label_line(self.LINE)
        np.testing.assert_allclose(inst.box3d.dims, [1.67, 1.65, 3.64])
        np.testing.assert_allclose(inst.box3d.center, [-0.65, 1.71 - 1.65 / 2, 46.70])
        assert inst.category == "car"
        assert inst.visibility == 1.0 and inst.truncation == 0.0
        assert inst.box2d_px == (587.01, 173.33, 614.12, 200.12)

    def test_heading_axis(self):
        # KITTI's length axis points along (cos ry, 0, -sin ry)
        ry = -1.59
        inst = parse_kitti_label_line(self.LINE)
        np.testing.assert_allclose(inst.box3d.rot.matrix[:, 2], [math.cos(ry), 0, -math.sin(ry)], atol=1e-12)
        np.testing.assert_allclose(inst.box3d.rot.matrix[:, 1], [0, 1, 0], atol=1e-12)

    def test_bottom_center_sits_on_location(self):
        inst = parse_kitti_label_line(self.LINE)
        assert inst.box3d.corners()[:, 1].max() == pytest.approx(1.71)

    def test_dontcare(self):
        assert parse_kitti_label_line("DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10") is None

    def test_short_line(self):
        with pytest.raises(ValueError):
            parse_kitti_label_line("Car 0 0")

    def test_calib_offset(self):
        calib = ("P0: 7.2e+02 0 6.0e+02 0 0 7.2e+02 1.7e+02 0 0 0 1 0\n"
                 "P2: 700 0 600 -35 0 700 170 0.7 0 0 1 0.002\n")
        K, off = parse_kitti_calib(calib)
        np.testing.assert_allclose(K, [[700, 0, 600], [0, 700, 170], [0, 0, 1]])
        np.testing.assert_allclose(K @ off, [-35, 0.7, 0.002])

    def test_directory_layout(self, tmp_path):
        (tmp_path / "label_2").mkdir()
        (tmp_path / "calib").mkdir()
        (tmp_path / "label_2" / "000001.txt").write_text(self.LINE + "\n")
        (tmp_path / "calib" / "000001.txt").write_text("P2: 721.5 0 609.6 44.9 0 721.5 172.9 0.2 0 0 1 0.003\n")
        (im,) = list(ingest("kitti", tmp_path))
        assert im.dataset == "kitti" and len(im.instances) == 1
        assert im.instances[0].box3d.center[0] == pytest.approx(-0.65 + (44.9 - 609.6 * 0.003) / 721.5)


class TestNuScenes:
    def test_identity_quaternion_axes(self):
        box = nuscenes_box([0, 0, 10], [2.0, 4.5, 1.6], [1, 0, 0, 0])
        ext = box.corners().max(axis=0) - box.corners().min(axis=0)
        # length along nuScenes x, width along y, height along z
        np.testing.assert_allclose(ext, [4.5, 2.0, 1.6], atol=1e-12)
        np.testing.assert_allclose(box.dims, [2.0, 1.6, 4.5])
        assert box.rot.is_orthonormal()


class TestFilter:
    @pytest.mark.parametrize("vis, kept", [(0.15, False), (0.16, False), (0.17, True)])
    def test_visibility_strict(self, cam, vis, kept):
        rec = make_record(cam, [0, 1, 20])
        rec.visibility = vis
        assert (drop_reason(rec, cam) is None) is kept
        if not kept:
            assert drop_reason(rec, cam) == LOW_VISIBILITY

    @pytest.mark.parametrize("trunc, kept", [(0.83, True), (0.84, False), (0.85, False)])
    def test_truncation_strict(self, cam, trunc, kept):
        rec = make_record(cam, [0, 1, 20])
        rec.truncation = trunc
        assert (drop_reason(rec, cam) is None) is kept
        if not kept:
            assert drop_reason(rec, cam) == HIGH_TRUNCATION

    def test_behind_camera(self, cam):
        image = RawImage("x.png", cam, [raw([0, 1, -2], dims=(1.8, 1.5, 3.0))])
        res = process_image(image)
        assert res.lines == [] and res.drops[0].reason == BEHIND_CAMERA

    def test_fully_outside(self, cam):
        image = RawImage("x.png", cam, [raw([80, 1, 10])])
        assert process_image(image).drops[0].reason == FULLY_OUTSIDE

    def test_estimates_flagged(self, cam):
        (rec,) = prepare_records(RawImage("x.png", cam, [raw([0, 1, 20])]))
        assert rec.estimated and rec.visibility == 1.0 and rec.truncation == 0.0

    def test_occluded_instance_estimated_low(self, cam):
        image = RawImage("x.png", cam, [raw([0, 1, 10], sid="near"), raw([0, 2, 30], sid="far")])
        res = process_image(image)
        assert [d.source_id for d in res.drops] == ["far"]


class TestGrouping:
    def test_sorted_by_depth(self, cam):
        image = RawImage("x.png", cam, [raw([-3, 1, 7.2], sid="a", vis=1, trunc=0),
                                        raw([0, 1, 3.1], sid="b", vis=1, trunc=0),
                                        raw([3, 1, 5.0], sid="c", vis=1, trunc=0)])
        (line,) = process_image(image).lines
        assert line.depths == [3.1, 5.0, 7.2]

    def test_one_line_per_category(self, cam):
        image = RawImage("x.png", cam, [raw([-3, 1, 7], vis=1, trunc=0),
                                        raw([3, 1, 9], "pedestrian", vis=1, trunc=0)])
        assert [l.category for l in process_image(image).lines] == ["car", "pedestrian"]

    def test_stable_ties(self, cam):
        image = RawImage("x.png", cam, [raw([-4, 1, 4.0], sid="first", vis=1, trunc=0),
                                        raw([4, 1, 4.0], sid="second", vis=1, trunc=0)])
        (line,) = process_image(image).lines
        assert [r.source[1] for r in line.instances] == ["first", "second"]


class TestCanonicalFormat:
    def test_line_roundtrip(self, golden_path):
        for text in golden_path.read_text().splitlines():
            line = canonical_line_from_dict(json.loads(text))
            assert canonical_line_to_json(line) == text

    def test_views_consistent(self, golden_path):
        for text in golden_path.read_text().splitlines():
            for inst in json.loads(text)["instances"]:
                rot = Rotation.from_euler_unit(inst["rot_euler_unit"])
                np.testing.assert_allclose(rot.matrix.reshape(-1), inst["rot_matrix"], atol=0.005 + 1e-9)
                np.testing.assert_allclose(rot.sincos_unit, inst["rot_sincos_unit"], atol=0.005 + 1e-9)
                assert 0.16 < inst["visibility"] and inst["truncation"] < 0.84

    def test_snap_is_idempotent(self):
        r = snap_rotation(Rotation.from_euler_zyx(0.123, -2.9, 1.0))
        assert snap_rotation(r).euler_unit == r.euler_unit


class TestNormalize:
    def test_golden(self, fixture_path, golden_path):
        assert serialize(normalize("synthetic", fixture_path)) == golden_path.read_text()

    def test_parallel_matches_serial(self, fixture_path):
        assert serialize(normalize("synthetic", fixture_path, workers=2)) == \
            serialize(normalize("synthetic", fixture_path))

    def test_reingest_is_idempotent(self, golden_path):
        assert serialize(normalize("canonical", golden_path)) == golden_path.read_text()
