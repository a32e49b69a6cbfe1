"""Dataset adapters: dataset-native annotations -> camera-frame ``RawImage`` records.

Adapters are registered by name.  Each is a callable ``(path, diagnostics)``
that yields ``RawImage`` objects and appends a ``Diagnostic`` for every line or
file it cannot read, then keeps going.

Shipped adapters
----------------
``synthetic``
    The reference fixture format: one JSON object per image, see
    :func:`read_synthetic`.
``kitti``
    A KITTI object-detection layout (``label_2/*.txt`` + ``calib/*.txt``).
``nuscenes_cam``
    nuScenes-style records whose boxes are already in the camera frame
    (world-to-camera transforms are out of scope).
``canonical``
    Re-ingests this package's own canonical output.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
from scipy.spatial.transform import Rotation as SciRotation

from ..geometry import Box3D, CameraIntrinsics, GeometryError, Rotation
from .records import Diagnostic, RawImage, RawInstance, canonical_line_from_dict

Adapter = Callable[[str, list], Iterator[RawImage]]
ADAPTERS: dict[str, Adapter] = {}

# KITTI "occluded" flag -> visibility fraction; 3 ("unknown") means estimate
KITTI_OCCLUSION_VISIBILITY = {0: 1.0, 1: 0.6, 2: 0.3}
KITTI_DEFAULT_SIZE = (1242, 375)
# nuScenes visibility tokens are 20-40% wide bins; we use bin midpoints
NUSCENES_VISIBILITY = {"1": 0.2, "2": 0.5, "3": 0.7, "4": 0.9}

# columns map box-local (width, height, length) axes onto nuScenes box axes
# (x forward/length, y left/width, z up/height); height points down as in KITTI
_NUSCENES_AXES = np.array([[0.0, 0.0, -1.0],
                           [1.0, 0.0, 0.0],
                           [0.0, -1.0, 0.0]])


class UnknownAdapterError(KeyError):
    pass


def register_adapter(name: str):
    def deco(fn: Adapter) -> Adapter:
        ADAPTERS[name] = fn
        return fn
    return deco


def ingest(adapter: str, source, diagnostics: Optional[list] = None) -> Iterator[RawImage]:
    """Stream ``RawImage`` records from ``source`` through a named adapter."""
    if adapter not in ADAPTERS:
        raise UnknownAdapterError(f"unknown adapter {adapter!r}; known: {sorted(ADAPTERS)}")
    if diagnostics is None:
        diagnostics = []
    return ADAPTERS[adapter](str(source), diagnostics)


def _iter_json_lines(path: str, diagnostics: list):
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        diagnostics.append(Diagnostic(path, f"unreadable: {exc}"))
        return
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                diagnostics.append(Diagnostic(path, f"corrupt JSON: {exc.msg}", lineno))


def _intrinsics_from(obj: dict) -> CameraIntrinsics:
    w, h = int(obj["width"]), int(obj["height"])
    if "K" in obj:
        return CameraIntrinsics.from_matrix(obj["K"], w, h)
    k = obj["intrinsics"]
    return CameraIntrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]), w, h)


def _rotation_from(inst: dict) -> Rotation:
    if "rot_matrix" in inst:
        return Rotation(inst["rot_matrix"])
    if "euler_zyx" in inst:
        return Rotation.from_euler_zyx(*inst["euler_zyx"])
    return Rotation.from_yaw(float(inst.get("yaw", 0.0)))


def _opt_float(v) -> Optional[float]:
    return None if v is None else float(v)


def read_synthetic(path: str, diagnostics: list) -> Iterator[RawImage]:
    """Fixture format, one image per line::

        {"image_path": str, "width": int, "height": int,
         "K": 3x3 | "intrinsics": {"fx", "fy", "cx", "cy"}, "dataset": str,
         "instances": [{"id": str, "category": str, "center": [x, y, z],
                        "dims": [w, h, l], "yaw" | "euler_zyx" | "rot_matrix",
                        "bbox_2d"?: [x1, y1, x2, y2], "visibility"?: float,
                        "truncation"?: float}]}

    A directory is read file by file in sorted order.
    """
    paths = sorted(str(p) for p in Path(path).glob("*.jsonl")) if os.path.isdir(path) else [path]
    for p in paths:
        for lineno, obj in _iter_json_lines(p, diagnostics):
            try:
                cam = _intrinsics_from(obj)
                insts = []
                for i, inst in enumerate(obj.get("instances", [])):
                    box = Box3D(inst["center"], inst["dims"], _rotation_from(inst))
                    insts.append(RawInstance(
                        category=str(inst["category"]),
                        box3d=box,
                        source_id=str(inst.get("id", i)),
                        box2d_px=tuple(float(v) for v in inst["bbox_2d"]) if inst.get("bbox_2d") else None,
                        visibility=_opt_float(inst.get("visibility")),
                        truncation=_opt_float(inst.get("truncation")),
                    ))
                yield RawImage(str(obj["image_path"]), cam, insts, str(obj.get("dataset", "synthetic")))
            except (KeyError, TypeError, ValueError, GeometryError) as exc:
                diagnostics.append(Diagnostic(p, f"bad record: {exc!r}", lineno))


register_adapter("synthetic")(read_synthetic)


def parse_kitti_calib(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (K, offset) from the P2 row of a KITTI calib file.

    ``offset`` is the camera-2 position correction ``K^-1 @ P2[:, 3]`` that
    moves rectified reference-camera coordinates into the camera-2 frame.
    """
    for line in text.splitlines():
        if line.startswith("P2:"):
            P = np.array([float(v) for v in line.split()[1:13]]).reshape(3, 4)
            K = P[:, :3]
            return K, np.linalg.solve(K, P[:, 3])
    raise ValueError("calib has no P2 row")


def parse_kitti_label_line(line: str, offset=(0.0, 0.0, 0.0)) -> Optional[RawInstance]:
    """Map one KITTI label line to a camera-frame instance.

    Field mapping: dims (h, w, l) -> (W, H, L) = (w, h, l); the bottom-center
    ``location`` is raised by h/2 to the box center; ``ry`` (heading of the
    length axis about camera Y) becomes yaw ``ry + pi/2`` because our length
    axis is the box-local z axis.  ``DontCare`` rows return ``None``.
    """
    f = line.split()
    if len(f) < 15:
        raise ValueError(f"expected 15 fields, got {len(f)}")
    cls = f[0]
    if cls == "DontCare":
        return None
    trunc, occl = float(f[1]), int(float(f[2]))
    bbox = tuple(float(v) for v in f[4:8])
    h, w, l = (float(v) for v in f[8:11])
    x, y, z = (float(v) for v in f[11:14])
    ry = float(f[14])
    center = np.array([x, y - h / 2.0, z]) + np.asarray(offset, dtype=float)
    box = Box3D(center, [w, h, l], Rotation.from_yaw(ry + math.pi / 2.0))
    return RawInstance(
        category=cls.lower(),
        box3d=box,
        source_id="",
        box2d_px=bbox,
        visibility=KITTI_OCCLUSION_VISIBILITY.get(occl),
        truncation=min(1.0, max(0.0, trunc)),
    )


def _image_size(path: Path) -> tuple[int, int]:
    try:
        from PIL import Image
    except ImportError:
        return KITTI_DEFAULT_SIZE
    try:
        with Image.open(path) as im:
            return im.size
    except OSError:
        return KITTI_DEFAULT_SIZE


def read_kitti(path: str, diagnostics: list) -> Iterator[RawImage]:
    """KITTI object layout: ``label_2/``, ``calib/`` and optionally ``image_2/``.

    Image sizes come from ``image_2`` when Pillow is installed and the image
    exists, else the nominal 1242x375.
    """
    root = Path(path)
    for label_path in sorted((root / "label_2").glob("*.txt")):
        stem = label_path.stem
        try:
            K, offset = parse_kitti_calib((root / "calib" / f"{stem}.txt").read_text())
        except (OSError, ValueError) as exc:
            diagnostics.append(Diagnostic(str(label_path), f"calib unusable: {exc}"))
            continue
        image = root / "image_2" / f"{stem}.png"
        w, h = _image_size(image)
        cam = CameraIntrinsics.from_matrix(K, w, h)
        insts = []
        for lineno, line in enumerate(label_path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                inst = parse_kitti_label_line(line, offset)
            except (ValueError, GeometryError) as exc:
                diagnostics.append(Diagnostic(str(label_path), f"bad label: {exc}", lineno))
                continue
            if inst is not None:
                inst.source_id = f"{stem}:{lineno}"
                insts.append(inst)
        yield RawImage(str(Path("image_2") / f"{stem}.png"), cam, insts, "kitti")


register_adapter("kitti")(read_kitti)


def nuscenes_box(center, wlh, rotation_wxyz) -> Box3D:
    """Camera-frame nuScenes box -> Box3D (dims reordered to (W, H, L))."""
    w, l, h = (float(v) for v in wlh)
    qw, qx, qy, qz = (float(v) for v in rotation_wxyz)
    R = SciRotation.from_quat([qx, qy, qz, qw]).as_matrix()
    return Box3D(center, [w, h, l], Rotation(R @ _NUSCENES_AXES))


def read_nuscenes_cam(path: str, diagnostics: list) -> Iterator[RawImage]:
    """One camera sample per line::

        {"image_path", "width", "height", "K": 3x3,
         "boxes": [{"token", "category", "center": camera-frame [x, y, z],
                    "wlh": [w, l, h], "rotation_wxyz": [w, x, y, z],
                    "visibility_level"?: "1".."4"}]}
    """
    for lineno, obj in _iter_json_lines(path, diagnostics):
        try:
            cam = _intrinsics_from(obj)
            insts = []
            for i, b in enumerate(obj.get("boxes", [])):
                insts.append(RawInstance(
                    category=str(b["category"]),
                    box3d=nuscenes_box(b["center"], b["wlh"], b["rotation_wxyz"]),
                    source_id=str(b.get("token", i)),
                    visibility=NUSCENES_VISIBILITY.get(str(b.get("visibility_level"))),
                ))
            yield RawImage(str(obj["image_path"]), cam, insts, str(obj.get("dataset", "nuscenes")))
        except (KeyError, TypeError, ValueError, GeometryError) as exc:
            diagnostics.append(Diagnostic(path, f"bad record: {exc!r}", lineno))


register_adapter("nuscenes_cam")(read_nuscenes_cam)


def read_canonical_images(path: str, diagnostics: list) -> Iterator[RawImage]:
    """Regroup canonical lines (consecutive lines per image) into images."""
    current: Optional[RawImage] = None
    for lineno, obj in _iter_json_lines(path, diagnostics):
        try:
            line = canonical_line_from_dict(obj)
        except (KeyError, TypeError, ValueError, GeometryError) as exc:
            diagnostics.append(Diagnostic(path, f"bad canonical line: {exc!r}", lineno))
            continue
        if current is None or current.image_path != line.image_path:
            if current is not None:
                yield current
            current = RawImage(line.image_path, line.intrinsics, [], line.dataset)
        for rec in line.instances:
            current.instances.append(RawInstance(
                category=rec.category, box3d=rec.box3d, source_id=rec.source[1],
                box2d_px=rec.box2d_px, box2d_norm=rec.box2d_norm,
                visibility=rec.visibility, truncation=rec.truncation, estimated=rec.estimated,
            ))
    if current is not None:
        yield current


register_adapter("canonical")(read_canonical_images)
