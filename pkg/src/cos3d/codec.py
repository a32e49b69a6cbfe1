"""Chain-of-Sight wire grammar: scene -> text and model text -> detections.

Each instance renders as ``<box2d>[x1, y1, x2, y2]</box2d><box3d>[...]</box3d>``
with 2D coordinates as integers in [0, 1000] and 3D fields as fixed
two-decimal numbers.  Instances are joined by ``", "``.  A response with no
instances is exactly ``<no_object/>``.  See docs/wire_format.md for the EBNF.
"""

from __future__ import annotations

import enum
import math
import random
import re
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import (
    Box3D,
    CameraIntrinsics,
    Rotation,
    angle_to_unit,
    dequantize2d,
    project_box,
    quantize2d,
    unit_to_angle,
)

NO_OBJECT = "<no_object/>"
SEPARATOR = ", "

__all__ = [
    "NO_OBJECT", "InterObjectOrder", "Factorization", "Intra3DOrder", "Layout",
    "RotationFormat", "SerializationPolicy", "DEFAULT_POLICY", "SceneInstance",
    "DecodedInstance", "CosSequence", "Terminal", "CosParseError", "CodecError",
    "encode_scene", "decode_sequence", "format_decimal", "order_instances",
    "quantize2d", "dequantize2d", "rotation_fields",
]


class CodecError(ValueError):
    pass


class CosParseError(CodecError):
    def __init__(self, offset: int, expected: str, found: str = ""):
        self.offset = offset
        self.expected = expected
        self.found = found
        msg = f"offset {offset}: expected {expected}"
        if found:
            msg += f", found {found!r}"
        super().__init__(msg)


class InterObjectOrder(enum.Enum):
    NEAR_TO_FAR = "near_to_far"
    LEFT_TO_RIGHT = "left_to_right"
    RANDOM = "random"


class Factorization(enum.Enum):
    TWO_D_THEN_THREE_D = "2d_then_3d"
    THREE_D_THEN_TWO_D = "3d_then_2d"
    THREE_D_ONLY = "3d_only"


class Intra3DOrder(enum.Enum):
    CENTER_SIZE_ROTATION = "center_size_rotation"
    CENTER_ROTATION_SIZE = "center_rotation_size"
    ROTATION_SIZE_CENTER = "rotation_size_center"


class Layout(enum.Enum):
    INTERLEAVED = "interleaved"
    CLUSTERED = "clustered"


class RotationFormat(enum.Enum):
    EULER_UNIT = "euler_unit"
    SINCOS_UNIT = "sincos_unit"
    YAW_ONLY = "yaw_only"


_GROUP_FIELDS = {
    "center": ("x", "y", "z"),
    "size": ("w", "h", "l"),
}
_ROTATION_FIELDS = {
    RotationFormat.EULER_UNIT: ("rz", "ry", "rx"),
    RotationFormat.SINCOS_UNIT: ("sin_rz", "cos_rz", "sin_ry", "cos_ry", "sin_rx", "cos_rx"),
    RotationFormat.YAW_ONLY: ("yaw",),
}
_GROUP_ORDER = {
    Intra3DOrder.CENTER_SIZE_ROTATION: ("center", "size", "rotation"),
    Intra3DOrder.CENTER_ROTATION_SIZE: ("center", "rotation", "size"),
    Intra3DOrder.ROTATION_SIZE_CENTER: ("rotation", "size", "center"),
}
_POLICY_KEYS = {
    "order": InterObjectOrder,
    "factorization": Factorization,
    "intra3d": Intra3DOrder,
    "layout": Layout,
    "rotation": RotationFormat,
}


@dataclass(frozen=True)
class SerializationPolicy:
    order: InterObjectOrder = InterObjectOrder.NEAR_TO_FAR
    factorization: Factorization = Factorization.TWO_D_THEN_THREE_D
    intra3d: Intra3DOrder = Intra3DOrder.CENTER_SIZE_ROTATION
    layout: Layout = Layout.INTERLEAVED
    rotation: RotationFormat = RotationFormat.EULER_UNIT
    seed: int = 0  # only used by RANDOM order

    @classmethod
    def parse(cls, text: Optional[str]) -> "SerializationPolicy":
        """Build a policy from ``"order=left_to_right,rotation=sincos_unit"``."""
        policy = cls()
        if not text:
            return policy
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            key, sep, value = item.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ValueError(f"policy item {item!r} is not key=value")
            if key == "seed":
                policy = replace(policy, seed=int(value))
            elif key in _POLICY_KEYS:
                try:
                    policy = replace(policy, **{key: _POLICY_KEYS[key](value)})
                except ValueError:
                    allowed = ", ".join(m.value for m in _POLICY_KEYS[key])
                    raise ValueError(f"bad {key} {value!r}; choose from {allowed}") from None
            else:
                raise ValueError(f"unknown policy key {key!r}")
        return policy

    def __str__(self) -> str:
        parts = [f"{k}={getattr(self, k).value}" for k in _POLICY_KEYS]
        if self.order is InterObjectOrder.RANDOM:
            parts.append(f"seed={self.seed}")
        return ",".join(parts)

    @classmethod
    def all_combinations(cls, seed: int = 0) -> list["SerializationPolicy"]:
        return [cls(*combo, seed=seed) for combo in product(*_POLICY_KEYS.values())]

    @cached_property
    def field_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for group in _GROUP_ORDER[self.intra3d]:
            names += _ROTATION_FIELDS[self.rotation] if group == "rotation" else _GROUP_FIELDS[group]
        return tuple(names)

    @cached_property
    def segment_kinds(self) -> tuple[str, ...]:
        return {
            Factorization.TWO_D_THEN_THREE_D: ("box2d", "box3d"),
            Factorization.THREE_D_THEN_TWO_D: ("box3d", "box2d"),
            Factorization.THREE_D_ONLY: ("box3d",),
        }[self.factorization]


DEFAULT_POLICY = SerializationPolicy()


@dataclass(frozen=True)
class SceneInstance:
    box3d: Box3D
    box2d_norm: Optional[tuple[int, int, int, int]]
    depth: float


def format_decimal(v: float) -> str:
    """Fixed two-decimal rendering; negative zero prints as ``0.00``."""
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def rotation_fields(rot: Rotation, fmt: RotationFormat) -> tuple[float, ...]:
    if fmt is RotationFormat.EULER_UNIT:
        return rot.euler_unit
    if fmt is RotationFormat.SINCOS_UNIT:
        return rot.sincos_unit
    return (angle_to_unit(rot.yaw),)


def _fields_3d(box: Box3D, policy: SerializationPolicy) -> list[float]:
    groups = {
        "center": box.center.tolist(),
        "size": box.dims.tolist(),
        "rotation": rotation_fields(box.rot, policy.rotation),
    }
    out: list[float] = []
    for g in _GROUP_ORDER[policy.intra3d]:
        out += groups[g]
    return out


def order_instances(instances: Sequence, policy: SerializationPolicy) -> list:
    items = list(instances)
    if policy.order is InterObjectOrder.NEAR_TO_FAR:
        return sorted(items, key=lambda inst: inst.depth)
    if policy.order is InterObjectOrder.LEFT_TO_RIGHT:
        return sorted(items, key=lambda inst: (inst.box2d_norm[0], inst.box2d_norm[1], inst.depth))
    random.Random(policy.seed).shuffle(items)
    return items


def _norm_box(inst, cam: Optional[CameraIntrinsics]) -> tuple[int, int, int, int]:
    norm = getattr(inst, "box2d_norm", None)
    if norm is not None:
        return tuple(int(v) for v in norm)
    if cam is None:
        raise CodecError("instance has no 2D box and no camera to project with")
    return quantize2d(project_box(inst.box3d, cam).clipped, cam)


def _segment(kind: str, values: Iterable[str]) -> str:
    return f"<{kind}>[{SEPARATOR.join(values)}]</{kind}>"


@lru_cache(maxsize=None)
def _decimal_template(n: int) -> str:
    return SEPARATOR.join(["{:.2f}"] * n)


def _decimals(vals: Sequence[float]) -> str:
    body = _decimal_template(len(vals)).format(*vals)
    return SEPARATOR.join(map(format_decimal, vals)) if "-0.00" in body else body


def _box3d_segment(box: Box3D, policy: SerializationPolicy) -> str:
    # boxes are immutable and augmentation re-encodes the same scene under many
    # policies, so the rendered segment is memoized per (rotation, group order)
    cache = box.__dict__.setdefault("_cos_segments", {})
    key = (policy.rotation, policy.intra3d)
    seg = cache.get(key)
    if seg is None:
        vals = _fields_3d(box, policy)
        if not all(map(math.isfinite, vals)):
            raise CodecError("non-finite 3D field")
        seg = cache[key] = f"<box3d>[{_decimals(vals)}]</box3d>"
    return seg


def encode_scene(instances: Sequence, policy: SerializationPolicy = DEFAULT_POLICY,
                 cam: Optional[CameraIntrinsics] = None) -> str:
    """Serialize instances (objects with ``box3d``, ``box2d_norm``, ``depth``)."""
    if not instances:
        return NO_OBJECT
    needs_2d = policy.factorization is not Factorization.THREE_D_ONLY
    if needs_2d:
        # LEFT_TO_RIGHT ordering keys off the normalized boxes
        instances = [inst if getattr(inst, "box2d_norm", None) is not None
                     else SceneInstance(inst.box3d, _norm_box(inst, cam), inst.depth)
                     for inst in instances]
    rendered = []
    for inst in order_instances(instances, policy):
        if not math.isfinite(inst.depth):
            raise CodecError("non-finite 3D field")
        segs = {"box3d": _box3d_segment(inst.box3d, policy)}
        if needs_2d:
            segs["box2d"] = _segment("box2d", map(str, _norm_box(inst, cam)))
        rendered.append([segs[k] for k in policy.segment_kinds])
    if policy.layout is Layout.CLUSTERED and len(policy.segment_kinds) == 2:
        first = [r[0] for r in rendered]
        second = [r[1] for r in rendered]
        return SEPARATOR.join(first + second)
    return SEPARATOR.join("".join(r) for r in rendered)


class Terminal(enum.Enum):
    END_OF_SEQUENCE = "EndOfSequence"
    NO_OBJECT = "NoObject"


@dataclass
class DecodedInstance:
    box2d_norm: Optional[tuple[int, int, int, int]]
    fields: dict[str, float]
    rotation_format: RotationFormat
    box2d_pixel: Optional[tuple[float, float, float, float]] = None

    @property
    def center(self) -> np.ndarray:
        return np.array([self.fields[k] for k in ("x", "y", "z")])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.fields[k] for k in ("w", "h", "l")])

    @property
    def angles(self) -> tuple[float, ...]:
        """Decoded angles: ZYX Euler triple, or a 1-tuple yaw."""
        f = self.fields
        if self.rotation_format is RotationFormat.EULER_UNIT:
            return tuple(unit_to_angle(f[k]) for k in ("rz", "ry", "rx"))
        if self.rotation_format is RotationFormat.SINCOS_UNIT:
            return Rotation.from_sincos_unit(
                [f[k] for k in _ROTATION_FIELDS[RotationFormat.SINCOS_UNIT]]).euler_zyx
        return (unit_to_angle(f["yaw"]),)

    @property
    def rotation(self) -> Rotation:
        if self.rotation_format is RotationFormat.YAW_ONLY:
            return Rotation.from_yaw(self.angles[0])
        return Rotation.from_euler_zyx(*self.angles)

    @property
    def depth(self) -> float:
        return self.fields["z"]

    def box3d(self) -> Box3D:
        return Box3D(self.center, np.maximum(self.dims, 0.0), self.rotation)


@dataclass
class CosSequence:
    instances: list[DecodedInstance]
    terminal: Terminal
    diagnostics: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)


_INT_RE = re.compile(r"0|[1-9][0-9]*")
_DEC_RE = re.compile(r"-?[0-9]+\.[0-9]{2}")


@lru_cache(maxsize=None)
def _segment_re(kind: str, arity: int) -> re.Pattern:
    """Whole well-formed segment in one match; anything else takes the slow path."""
    num = _INT_RE.pattern if kind == "box2d" else _DEC_RE.pattern
    sep = re.escape(SEPARATOR)
    return re.compile(rf"<{kind}>\[((?:{num})(?:{sep}(?:{num})){{{arity - 1}}})\]</{kind}>")


@lru_cache(maxsize=None)
def _sequence_res(policy: "SerializationPolicy") -> tuple[re.Pattern, re.Pattern, ...]:
    """Full-text validator plus one extractor per segment kind, for the fast path."""
    sep = re.escape(SEPARATOR)
    kinds = policy.segment_kinds
    segs = {k: _segment_re(k, _arity(k, policy)).pattern for k in kinds}
    bare = {k: segs[k].replace("((?:", "(?:(?:", 1) for k in kinds}
    if policy.layout is Layout.CLUSTERED and len(kinds) == 2:
        a, b = bare[kinds[0]], bare[kinds[1]]
        full = rf"{a}(?:{sep}{a})*(?:{sep}{b})+"
    else:
        unit = "".join(bare[k] for k in kinds)
        full = rf"{unit}(?:{sep}{unit})*"
    return (re.compile(full), *(re.compile(segs[k]) for k in kinds))


def _fast_records(text: str, policy: "SerializationPolicy") -> Optional[list[dict]]:
    """Records for a well-formed text, or None so the cursor parser can report the error."""
    full, *extract = _sequence_res(policy)
    if not full.fullmatch(text):
        return None
    kinds = policy.segment_kinds
    columns = [[body.split(SEPARATOR) for body in rx.findall(text)] for rx in extract]
    if any(len(c) != len(columns[0]) for c in columns):
        return None
    if "box2d" in kinds:
        i = kinds.index("box2d")
        boxes = [tuple(map(int, v)) for v in columns[i]]
        if any(max(b) > 1000 or b[0] > b[2] or b[1] > b[3] for b in boxes):
            return None
        columns[i] = boxes
    return [dict(zip(kinds, vals)) for vals in zip(*columns)]


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def startswith(self, lit: str) -> bool:
        return self.text.startswith(lit, self.pos)

    def _found(self) -> str:
        return self.text[self.pos:self.pos + 12] if not self.at_end() else "end of text"

    def expect(self, lit: str, what: Optional[str] = None) -> None:
        if not self.startswith(lit):
            raise CosParseError(self.pos, what or repr(lit), self._found())
        self.pos += len(lit)

    def number(self, kind: str) -> tuple[str, int]:
        rx = _INT_RE if kind == "box2d" else _DEC_RE
        m = rx.match(self.text, self.pos)
        if not m:
            what = "integer" if kind == "box2d" else "two-decimal number"
            raise CosParseError(self.pos, what, self._found())
        start = self.pos
        self.pos = m.end()
        return m.group(0), start

    def segment(self, kind: str, arity: int) -> list[str]:
        m = _segment_re(kind, arity).match(self.text, self.pos)
        if m:
            self.pos = m.end()
            return m.group(1).split(SEPARATOR)
        start = self.pos
        self.expect(f"<{kind}>[", f"'<{kind}>['")
        values = [self.number(kind)[0]]
        while self.startswith(SEPARATOR):
            self.pos += len(SEPARATOR)
            values.append(self.number(kind)[0])
        if len(values) != arity:
            raise CosParseError(start, f"{arity} values in <{kind}>", f"arity {len(values)}")
        self.expect(f"]</{kind}>", f"']</{kind}>'")
        return values


def _arity(kind: str, policy: SerializationPolicy) -> int:
    return 4 if kind == "box2d" else len(policy.field_names)


def _check_2d(values: Sequence[int], offset: int) -> tuple[int, int, int, int]:
    if any(v > 1000 for v in values):
        raise CosParseError(offset, "2D coordinates in [0, 1000]", str(list(values)))
    if values[0] > values[2] or values[1] > values[3]:
        raise CosParseError(offset, "xmin <= xmax and ymin <= ymax", str(list(values)))
    return tuple(values)


def _build(policy: SerializationPolicy, seg_values: dict[str, list],
           cam: Optional[CameraIntrinsics]) -> DecodedInstance:
    norm = seg_values.get("box2d")
    fields = dict(zip(policy.field_names, map(float, seg_values["box3d"])))
    inst = DecodedInstance(tuple(norm) if norm is not None else None,
                           fields, policy.rotation)
    if cam is not None and inst.box2d_norm is not None:
        inst.box2d_pixel = dequantize2d(inst.box2d_norm, cam)
    return inst


def _decode_strict(text: str, policy: SerializationPolicy,
                   cam: Optional[CameraIntrinsics]) -> CosSequence:
    if text == NO_OBJECT:
        return CosSequence([], Terminal.NO_OBJECT)
    records = _fast_records(text, policy)
    if records is not None:
        return CosSequence([_build(policy, r, cam) for r in records], Terminal.END_OF_SEQUENCE)
    cur = _Cursor(text)
    kinds = policy.segment_kinds

    def read(kind):
        start = cur.pos
        vals = cur.segment(kind, _arity(kind, policy))
        if kind == "box2d":
            vals = _check_2d([int(v) for v in vals], start)
        return vals

    records: list[dict] = []
    if policy.layout is Layout.CLUSTERED and len(kinds) == 2:
        first = [read(kinds[0])]
        while cur.startswith(SEPARATOR + f"<{kinds[0]}>"):
            cur.pos += len(SEPARATOR)
            first.append(read(kinds[0]))
        second = []
        for i in range(len(first)):
            cur.expect(SEPARATOR, f"', ' before <{kinds[1]}> {i + 1} of {len(first)}")
            second.append(read(kinds[1]))
        records = [{kinds[0]: a, kinds[1]: b} for a, b in zip(first, second)]
    else:
        while True:
            rec = {}
            for kind in kinds:
                rec[kind] = read(kind)
            records.append(rec)
            if cur.at_end():
                break
            cur.expect(SEPARATOR, "', ' or end of text")
    if not cur.at_end():
        raise CosParseError(cur.pos, "end of text", cur._found())
    return CosSequence([_build(policy, r, cam) for r in records], Terminal.END_OF_SEQUENCE)


_LOOSE_SEG_RE = re.compile(r"<(box2d|box3d)>(.*?)</\1>", re.S)
_LOOSE_BODY_RE = re.compile(r"^\s*\[(.*)\]\s*$", re.S)


def _loose_values(kind: str, body: str, policy: SerializationPolicy):
    """Parse a segment body leniently; returns (values, problem)."""
    m = _LOOSE_BODY_RE.match(body)
    if not m:
        return None, "missing brackets"
    parts = [p.strip() for p in m.group(1).split(",")] if m.group(1).strip() else []
    arity = _arity(kind, policy)
    if len(parts) != arity:
        return None, f"arity {len(parts)}, expected {arity}"
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        return None, "non-numeric value"
    if not all(math.isfinite(v) for v in nums):
        return None, "non-finite value"
    if kind == "box2d":
        ints = [int(round(v)) for v in nums]
        if any(v < 0 or v > 1000 for v in ints) or ints[0] > ints[2] or ints[1] > ints[3]:
            return None, f"invalid 2D box {ints}"
        return ints, None
    return nums, None


def _decode_recover(text: str, policy: SerializationPolicy,
                    cam: Optional[CameraIntrinsics]) -> CosSequence:
    diags: list[str] = []
    segs = []
    last = 0
    for m in _LOOSE_SEG_RE.finditer(text):
        gap = text[last:m.start()].strip().strip(",").strip()
        if gap and gap != NO_OBJECT:
            diags.append(f"offset {last}: ignored text {gap[:30]!r}")
        vals, problem = _loose_values(m.group(1), m.group(2), policy)
        if problem:
            diags.append(f"offset {m.start()}: <{m.group(1)}> {problem}")
        segs.append((m.group(1), vals, m.start()))
        last = m.end()
    tail = text[last:].strip().strip(",").strip()
    if tail and tail != NO_OBJECT:
        diags.append(f"offset {last}: ignored text {tail[:30]!r}")
    if not segs:
        terminal = Terminal.NO_OBJECT
        return CosSequence([], terminal, diags)

    kinds = policy.segment_kinds
    records: list[dict] = []
    if len(kinds) == 1:
        for kind, vals, off in segs:
            if kind != kinds[0]:
                diags.append(f"offset {off}: unexpected <{kind}> segment")
            elif vals is not None:
                records.append({kind: vals})
    elif policy.layout is Layout.CLUSTERED:
        first = [s for s in segs if s[0] == kinds[0]]
        second = [s for s in segs if s[0] == kinds[1]]
        if len(first) != len(second):
            diags.append(f"cluster size mismatch: {len(first)} <{kinds[0]}> vs "
                         f"{len(second)} <{kinds[1]}>")
        for a, b in zip(first, second):
            if a[1] is not None and b[1] is not None:
                records.append({kinds[0]: a[1], kinds[1]: b[1]})
            else:
                diags.append(f"offset {a[2]}: instance skipped")
    else:
        pending = None
        for kind, vals, off in segs:
            if kind == kinds[0]:
                if pending is not None:
                    diags.append(f"offset {pending[2]}: <{kinds[0]}> without <{kinds[1]}>")
                pending = (kind, vals, off)
                continue
            if pending is None:
                diags.append(f"offset {off}: <{kind}> without preceding <{kinds[0]}>")
                continue
            if pending[1] is None or vals is None:
                diags.append(f"offset {pending[2]}: instance skipped")
            else:
                records.append({kinds[0]: pending[1], kind: vals})
            pending = None
        if pending is not None:
            diags.append(f"offset {pending[2]}: <{kinds[0]}> without <{kinds[1]}>")
    terminal = Terminal.END_OF_SEQUENCE if records else Terminal.NO_OBJECT
    return CosSequence([_build(policy, r, cam) for r in records], terminal, diags)


def decode_sequence(text: str, policy: SerializationPolicy = DEFAULT_POLICY,
                    mode: str = "strict", cam: Optional[CameraIntrinsics] = None) -> CosSequence:
    """Parse a response. ``mode`` is ``"strict"`` (raise) or ``"recover"`` (skip and report)."""
    if mode == "strict":
        return _decode_strict(text, policy, cam)
    if mode == "recover":
        return _decode_recover(text.strip(), policy, cam)
    raise ValueError(f"unknown decode mode {mode!r}")
