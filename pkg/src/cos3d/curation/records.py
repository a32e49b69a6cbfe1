"""Instance/line records and the canonical line-delimited JSON format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..codec import format_decimal
from ..geometry import Box3D, CameraIntrinsics, Rotation, depth_of


@dataclass
class RawInstance:
    """One annotation as an adapter translated it, before estimation/filtering."""

    category: str
    box3d: Box3D
    source_id: str
    box2d_px: Optional[tuple[float, float, float, float]] = None
    box2d_norm: Optional[tuple[int, int, int, int]] = None
    visibility: Optional[float] = None
    truncation: Optional[float] = None
    estimated: bool = False


@dataclass
class RawImage:
    image_path: str
    intrinsics: CameraIntrinsics
    instances: list[RawInstance]
    dataset: str = ""


@dataclass
class InstanceRecord:
    category: str
    box3d: Box3D
    box2d_px: Optional[tuple[float, float, float, float]]
    box2d_norm: Optional[tuple[int, int, int, int]]
    depth: float
    visibility: Optional[float]
    truncation: Optional[float]
    estimated: bool = False
    source: tuple[str, str] = ("", "")  # (dataset id, original instance id)
    order: int = 0  # position in the source annotation, for stable ties


@dataclass
class CanonicalLine:
    image_path: str
    category: str
    intrinsics: CameraIntrinsics
    instances: list[InstanceRecord]
    dataset: str = ""

    @property
    def image_width(self) -> int:
        return self.intrinsics.width

    @property
    def image_height(self) -> int:
        return self.intrinsics.height

    @property
    def depths(self) -> list[float]:
        return [r.depth for r in self.instances]


@dataclass(frozen=True)
class DropRecord:
    image_path: str
    category: str
    source_id: str
    reason: str

    def to_json(self) -> str:
        return json.dumps({"image_path": self.image_path, "category_name": self.category,
                           "source_id": self.source_id, "reason": self.reason})


@dataclass
class Diagnostic:
    source: str
    message: str
    line: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        out = {"source": self.source, "line": self.line, "message": self.message}
        out.update(self.extra)
        return json.dumps(out)


def _nums(values: Sequence[float]) -> str:
    return "[" + ", ".join(format_decimal(float(v)) for v in values) + "]"


def _ints(values: Sequence[int]) -> str:
    return "[" + ", ".join(str(int(v)) for v in values) + "]"


def _opt(v: Optional[float]) -> str:
    return "null" if v is None else format_decimal(v)


def instance_to_json(rec: InstanceRecord) -> str:
    rot = rec.box3d.rot
    parts = [
        f'"bbox_2d_px": {_nums(rec.box2d_px)}',
        f'"bbox_2d_norm": {_ints(rec.box2d_norm)}',
        f'"center_cam": {_nums(rec.box3d.center)}',
        f'"dims_whl": {_nums(rec.box3d.dims)}',
        f'"rot_matrix": {_nums(rot.matrix.reshape(-1))}',
        f'"rot_euler_unit": {_nums(rot.euler_unit)}',
        f'"rot_sincos_unit": {_nums(rot.sincos_unit)}',
        f'"depth": {format_decimal(rec.depth)}',
        f'"visibility": {_opt(rec.visibility)}',
        f'"truncation": {_opt(rec.truncation)}',
        f'"estimated": {"true" if rec.estimated else "false"}',
    ]
    return "{" + ", ".join(parts) + "}"


def canonical_line_to_json(line: CanonicalLine) -> str:
    """Serialize with a fixed field order and fixed two-decimal numbers."""
    parts = [
        f'"image_path": {json.dumps(line.image_path)}',
        f'"category_name": {json.dumps(line.category)}',
        f'"image_width": {line.image_width}',
        f'"image_height": {line.image_height}',
        f'"K": {_nums(line.intrinsics.matrix.reshape(-1))}',
        '"instances": [' + ", ".join(instance_to_json(r) for r in line.instances) + "]",
        f'"dataset": {json.dumps(line.dataset)}',
    ]
    return "{" + ", ".join(parts) + "}"


def canonical_line_from_dict(obj: dict, depth_mode: str = "z") -> CanonicalLine:
    """Inverse of :func:`canonical_line_to_json` (rotation rebuilt from Euler units)."""
    cam = CameraIntrinsics.from_matrix(obj["K"], obj["image_width"], obj["image_height"])
    recs = []
    for i, inst in enumerate(obj["instances"]):
        box = Box3D(inst["center_cam"], inst["dims_whl"], Rotation.from_euler_unit(inst["rot_euler_unit"]))
        recs.append(InstanceRecord(
            category=obj["category_name"],
            box3d=box,
            box2d_px=tuple(float(v) for v in inst["bbox_2d_px"]),
            box2d_norm=tuple(int(v) for v in inst["bbox_2d_norm"]),
            depth=float(inst["depth"]) if "depth" in inst else depth_of(box, depth_mode),
            visibility=inst.get("visibility"),
            truncation=inst.get("truncation"),
            estimated=bool(inst.get("estimated", False)),
            source=(obj.get("dataset", ""), f"{obj['image_path']}#{obj['category_name']}#{i}"),
            order=i,
        ))
    return CanonicalLine(obj["image_path"], obj["category_name"], cam, recs, obj.get("dataset", ""))


def read_canonical(path) -> list[CanonicalLine]:
    with open(path, encoding="utf-8") as fh:
        return [canonical_line_from_dict(json.loads(line)) for line in fh if line.strip()]
