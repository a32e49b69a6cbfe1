"""Stage I: estimate missing metadata, filter, group by category, sort by depth."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Optional

from ..geometry import (
    BehindCameraError,
    Box3D,
    CameraIntrinsics,
    FrustumStatus,
    Rotation,
    depth_of,
    frustum_status,
    project_box,
    quantize2d,
    truncation_estimate,
    visibility_estimate,
)
from .adapters import ingest
from .records import CanonicalLine, DropRecord, InstanceRecord, RawImage

MIN_VISIBILITY = 0.16  # keep iff visibility > this
MAX_TRUNCATION = 0.84  # keep iff truncation < this

BEHIND_CAMERA = "BehindCamera"
FULLY_OUTSIDE = "FullyOutside"
LOW_VISIBILITY = "LowVisibility"
HIGH_TRUNCATION = "HighTruncation"


def _round2(v: Optional[float]) -> Optional[float]:
    return None if v is None else round(float(v), 2)


def prepare_records(image: RawImage, depth_mode: str = "z") -> list[InstanceRecord]:
    """Attach 2D boxes, depth and (native or estimated) visibility/truncation.

    Visibility and truncation are rounded to two decimals before filtering
    so that re-ingesting canonical output makes the same keep/drop calls.
    """
    cam = image.intrinsics
    recs: list[InstanceRecord] = []
    for i, raw in enumerate(image.instances):
        px, norm = raw.box2d_px, raw.box2d_norm
        if px is None:
            try:
                px = project_box(raw.box3d, cam).clipped
            except BehindCameraError:
                pass  # no 2D box; the frustum filter drops it
        if px is not None and norm is None:
            norm = quantize2d(px, cam)
        recs.append(InstanceRecord(
            category=raw.category,
            box3d=raw.box3d,
            box2d_px=px,
            box2d_norm=norm,
            depth=depth_of(raw.box3d, depth_mode),
            visibility=raw.visibility,
            truncation=raw.truncation,
            estimated=raw.estimated,
            source=(image.dataset, raw.source_id),
            order=i,
        ))
    occluders = [(r.box3d, r.box2d_px) for r in recs if r.box2d_px is not None]
    for r in recs:
        if r.box2d_px is None:
            continue
        if r.truncation is None:
            try:
                r.truncation = truncation_estimate(r.box3d, cam)
                r.estimated = True
            except BehindCameraError:
                pass
        if r.visibility is None:
            r.visibility = visibility_estimate((r.box3d, r.box2d_px), occluders, depth_mode)
            r.estimated = True
        r.visibility = _round2(r.visibility)
        r.truncation = _round2(r.truncation)
    return recs


def drop_reason(rec: InstanceRecord, cam: CameraIntrinsics) -> Optional[str]:
    status = frustum_status(rec.box3d, cam)
    if status is FrustumStatus.BEHIND_CAMERA:
        return BEHIND_CAMERA
    if status is FrustumStatus.FULLY_OUTSIDE:
        return FULLY_OUTSIDE
    if rec.visibility is None or not rec.visibility > MIN_VISIBILITY:
        return LOW_VISIBILITY
    if rec.truncation is None or not rec.truncation < MAX_TRUNCATION:
        return HIGH_TRUNCATION
    return None


def filter_instances(records: Iterable[InstanceRecord], cam: CameraIntrinsics,
                     image_path: str = "") -> tuple[list[InstanceRecord], list[DropRecord]]:
    """Split records into kept ones and a drop report with one reason each."""
    kept, dropped = [], []
    for rec in records:
        reason = drop_reason(rec, cam)
        if reason is None:
            kept.append(rec)
        else:
            dropped.append(DropRecord(image_path, rec.category, rec.source[1], reason))
    return kept, dropped


def snap_rotation(rot: Rotation) -> Rotation:
    """Quantize to the two-decimal Euler-unit grid every rotation view is written from."""
    units = []
    for u in rot.euler_unit:
        q = round(u, 2)
        units.append(0.0 if q >= 1.0 else q)
    return Rotation.from_euler_unit(units)


def build_canonical_lines(image: RawImage, kept: Iterable[InstanceRecord]) -> list[CanonicalLine]:
    """One line per category (sorted by name); instances by depth, ties by source order."""
    groups: dict[str, list[InstanceRecord]] = {}
    for rec in kept:
        groups.setdefault(rec.category, []).append(rec)
    lines = []
    for cat in sorted(groups):
        recs = sorted(groups[cat], key=lambda r: (r.depth, r.order))
        recs = [replace(r, box3d=Box3D(r.box3d.center, r.box3d.dims, snap_rotation(r.box3d.rot)))
                for r in recs]
        lines.append(CanonicalLine(image.image_path, cat, image.intrinsics, recs, image.dataset))
    return lines


@dataclass
class ImageResult:
    lines: list[CanonicalLine]
    drops: list[DropRecord]


def process_image(image: RawImage, depth_mode: str = "z") -> ImageResult:
    recs = prepare_records(image, depth_mode)
    kept, drops = filter_instances(recs, image.intrinsics, image.image_path)
    return ImageResult(build_canonical_lines(image, kept), drops)


def _process(args):
    return process_image(*args)


def normalize(adapter: str, source, depth_mode: str = "z", workers: int = 1,
              diagnostics: Optional[list] = None) -> Iterator[ImageResult]:
    """Stream per-image results in input order; parallel across images if workers > 1."""
    if diagnostics is None:
        diagnostics = []
    images = ingest(adapter, source, diagnostics)
    if workers <= 1:
        for image in images:
            yield process_image(image, depth_mode)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_process, ((im, depth_mode) for im in images), chunksize=16)
