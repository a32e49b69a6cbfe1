import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cos3d.codec import (
    DEFAULT_POLICY,
    NO_OBJECT,
    CodecError,
    CosParseError,
    Factorization,
    InterObjectOrder,
    Layout,
    RotationFormat,
    SceneInstance,
    SerializationPolicy,
    Terminal,
    decode_sequence,
    encode_scene,
    format_decimal,
)
from cos3d.geometry import Box3D, Rotation, wrap_angle

from conftest import random_rotation

SPEC_EXAMPLE = ("<box2d>[100, 200, 300, 400]</box2d>"
                "<box3d>[1.23, 0.00, 5.68, 2.00, 1.00, 3.00, 0.50, 0.50, 0.50]</box3d>")


def inst(center, dims=(2, 1, 3), rot=None, norm=(100, 200, 300, 400)):
    box = Box3D(center, dims, rot or Rotation.identity())
    return SceneInstance(box, norm, float(box.center[2]))


def random_scene(rng, n, yaw_only=False):
    out = []
    for _ in range(n):
        x1, x2 = sorted(rng.integers(0, 1001, 2))
        y1, y2 = sorted(rng.integers(0, 1001, 2))
        rot = Rotation.from_yaw(rng.uniform(-math.pi, math.pi)) if yaw_only else random_rotation(rng)
        box = Box3D([rng.uniform(-20, 20), rng.uniform(-3, 3), rng.uniform(0.5, 80)],
                    rng.uniform(0.1, 6, 3), rot)
        out.append(SceneInstance(box, (int(x1), int(y1), int(x2), int(y2)), float(box.center[2])))
    return out


class TestEncode:
    def test_empty_is_sentinel(self):
        assert encode_scene([], DEFAULT_POLICY) == NO_OBJECT

    def test_reference_string(self):
        assert encode_scene([inst([1.234, 0, 5.678])]) == SPEC_EXAMPLE

    def test_near_first(self):
        far = inst([0, 0, 8.0], norm=(1, 1, 2, 2))
        near = inst([0, 0, 3.0], norm=(5, 5, 6, 6))
        text = encode_scene([far, near])
        assert text.index("[5, 5, 6, 6]") < text.index("[1, 1, 2, 2]")

    def test_left_to_right(self):
        a = inst([0, 0, 3.0], norm=(500, 0, 600, 10))
        b = inst([0, 0, 9.0], norm=(100, 0, 200, 10))
        text = encode_scene([a, b], SerializationPolicy.parse("order=left_to_right"))
        assert text.index("[100, 0, 200, 10]") < text.index("[500, 0, 600, 10]")

    def test_negative_zero(self):
        assert format_decimal(-0.001) == "0.00"
        assert format_decimal(-0.006) == "-0.01"

    def test_non_finite_rejected(self):
        s = inst([0, 0, 5])
        bad = SceneInstance(s.box3d, s.box2d_norm, float("inf"))
        with pytest.raises(CodecError):
            encode_scene([bad])

    def test_clustered_layout(self):
        pol = SerializationPolicy.parse("layout=clustered")
        text = encode_scene([inst([0, 0, 3]), inst([0, 0, 4], norm=(1, 2, 3, 4))], pol)
        kinds = re.findall(r"<(box2d|box3d)>", text)
        assert kinds == ["box2d", "box2d", "box3d", "box3d"]

    def test_3d_only(self):
        text = encode_scene([inst([1, 2, 3])], SerializationPolicy.parse("factorization=3d_only"))
        assert "<box2d>" not in text and text.startswith("<box3d>")

    def test_field_counts(self):
        for fmt, k in ((RotationFormat.EULER_UNIT, 9), (RotationFormat.SINCOS_UNIT, 12),
                       (RotationFormat.YAW_ONLY, 7)):
            pol = SerializationPolicy(rotation=fmt)
            body = re.search(r"<box3d>\[(.*)\]</box3d>", encode_scene([inst([0, 0, 5])], pol)).group(1)
            assert len(body.split(", ")) == k

    def test_random_order_is_seeded(self):
        rng = np.random.default_rng(0)
        scene = random_scene(rng, 8)
        pol = SerializationPolicy(order=InterObjectOrder.RANDOM, seed=5)
        assert encode_scene(scene, pol) == encode_scene(scene, pol)

    def test_projects_when_norm_missing(self, cam1000):
        box = Box3D([0, 0, 5], [1, 1, 1], Rotation.identity())
        text = encode_scene([SceneInstance(box, None, 5.0)], DEFAULT_POLICY, cam1000)
        assert text.startswith("<box2d>[389, 389, 611, 611]</box2d>")


class TestPolicy:
    def test_default(self):
        p = SerializationPolicy()
        assert (p.order, p.factorization, p.layout, p.rotation) == (
            InterObjectOrder.NEAR_TO_FAR, Factorization.TWO_D_THEN_THREE_D,
            Layout.INTERLEAVED, RotationFormat.EULER_UNIT)

    def test_parse_roundtrip(self):
        for p in SerializationPolicy.all_combinations(seed=3):
            q = SerializationPolicy.parse(str(p))
            assert str(q) == str(p)
            if p.order is InterObjectOrder.RANDOM:
                assert q.seed == 3

    def test_count(self):
        assert len(SerializationPolicy.all_combinations()) == 3 * 3 * 3 * 2 * 3

    @pytest.mark.parametrize("text", ["order=sideways", "bogus=1", "order"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            SerializationPolicy.parse(text)


class TestDecode:
    def test_sentinel(self):
        seq = decode_sequence(NO_OBJECT)
        assert seq.instances == [] and seq.terminal is Terminal.NO_OBJECT

    def test_reference_string(self):
        seq = decode_sequence(SPEC_EXAMPLE)
        assert seq.terminal is Terminal.END_OF_SEQUENCE
        (d,) = seq.instances
        assert d.box2d_norm == (100, 200, 300, 400)
        np.testing.assert_allclose(d.center, [1.23, 0.0, 5.68])
        np.testing.assert_allclose(d.rotation.matrix, np.eye(3), atol=1e-12)

    def test_recover_arity(self):
        text = ("<box2d>[100, 200, 300]</box2d><box3d>[1.00, 0.00, 5.00, 1.00, 1.00, 1.00, 0.50, 0.50, 0.50]"
                "</box3d>, " + SPEC_EXAMPLE)
        seq = decode_sequence(text, mode="recover")
        assert len(seq.instances) == 1
        assert any("arity 3, expected 4" in d for d in seq.diagnostics)
        assert any("instance skipped" in d for d in seq.diagnostics)

    def test_strict_reports_offset(self):
        text = "<box2d>[100, 200, 300]</box2d>"
        with pytest.raises(CosParseError) as exc:
            decode_sequence(text)
        # arity errors point at the start of the offending segment
        assert exc.value.offset == 0
        assert "arity 3" in str(exc.value)

    def test_strict_reports_token_offset(self):
        text = SPEC_EXAMPLE.replace("5.68", "5.6x")
        with pytest.raises(CosParseError) as exc:
            decode_sequence(text)
        assert exc.value.offset == text.index("5.6x")

    @pytest.mark.parametrize("text", [
        "", "garbage", SPEC_EXAMPLE + ",", SPEC_EXAMPLE + ", ", SPEC_EXAMPLE.replace("0.50]", "0.5]"),
        SPEC_EXAMPLE.replace("100", "1001"), SPEC_EXAMPLE.replace("[100, 200", "[400, 200"),
        SPEC_EXAMPLE + NO_OBJECT, " " + SPEC_EXAMPLE,
    ])
    def test_strict_rejects(self, text):
        with pytest.raises(CosParseError):
            decode_sequence(text)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            decode_sequence(NO_OBJECT, mode="lenient")

    def test_dequantizes_with_camera(self, cam1000):
        (d,) = decode_sequence(SPEC_EXAMPLE, cam=cam1000).instances
        assert d.box2d_pixel == (100.0, 200.0, 300.0, 400.0)

    def test_prefix_never_gains_instances(self):
        rng = np.random.default_rng(1)
        for policy in (DEFAULT_POLICY, SerializationPolicy.parse("layout=clustered")):
            text = encode_scene(random_scene(rng, 3), policy)
            full = len(decode_sequence(text, policy).instances)
            for cut in range(1, len(text)):
                try:
                    n = len(decode_sequence(text[:cut], policy).instances)
                except CosParseError:
                    continue
                assert n < full


def angle_err(a, b):
    return abs(wrap_angle(a - b))


def check_roundtrip(scene, policy):
    text = encode_scene(scene, policy)
    seq = decode_sequence(text, policy)
    assert len(seq.instances) == len(scene)
    # decoded instances come back in emission order; match by 2D box + rounded center
    if policy.order is InterObjectOrder.NEAR_TO_FAR:
        depths = [d.depth for d in seq.instances]
        assert depths == sorted(depths)
    ordered = sorted(scene, key=lambda s: s.depth) if policy.order is InterObjectOrder.NEAR_TO_FAR else None
    if ordered is not None:
        for src, dec in zip(ordered, seq.instances):
            if policy.factorization is not Factorization.THREE_D_ONLY:
                assert dec.box2d_norm == src.box2d_norm
            assert np.all(np.abs(dec.center - src.box3d.center) <= 0.005 + 1e-12)
            assert np.all(np.abs(dec.dims - src.box3d.dims) <= 0.005 + 1e-12)
    return seq


class TestRoundTrip:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 20))
    def test_default_policy(self, seed, n):
        check_roundtrip(random_scene(np.random.default_rng(seed), n), DEFAULT_POLICY)

    def test_euler_angles_within_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            rot = random_rotation(rng)
            seq = decode_sequence(encode_scene([inst([0, 0, 5], rot=rot)]))
            for a, b in zip(seq.instances[0].angles, rot.euler_zyx):
                assert angle_err(a, b) <= math.pi * 0.01 + 1e-12

    def test_sincos_angles_within_bound(self):
        rng = np.random.default_rng(5)
        pol = SerializationPolicy(rotation=RotationFormat.SINCOS_UNIT)
        for _ in range(200):
            rot = random_rotation(rng)
            seq = decode_sequence(encode_scene([inst([0, 0, 5], rot=rot)], pol), pol)
            for a, b in zip(seq.instances[0].angles, rot.euler_zyx):
                assert angle_err(a, b) <= math.pi * 0.01

    def test_yaw_within_bound(self):
        rng = np.random.default_rng(6)
        pol = SerializationPolicy(rotation=RotationFormat.YAW_ONLY)
        for _ in range(200):
            yaw = rng.uniform(-math.pi, math.pi)
            seq = decode_sequence(encode_scene([inst([0, 0, 5], rot=Rotation.from_yaw(yaw))], pol), pol)
            assert angle_err(seq.instances[0].rotation.yaw, yaw) <= math.pi * 0.01 + 1e-12

    def test_layouts_agree(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            scene = random_scene(rng, int(rng.integers(1, 10)))
            sets = []
            for layout in Layout:
                pol = SerializationPolicy(layout=layout)
                seq = decode_sequence(encode_scene(scene, pol), pol)
                sets.append(sorted((d.box2d_norm, tuple(d.fields.values())) for d in seq.instances))
            assert sets[0] == sets[1]

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        scene = random_scene(rng, 6)
        for pol in SerializationPolicy.all_combinations(seed=2):
            assert encode_scene(scene, pol) == encode_scene(list(scene), pol)
