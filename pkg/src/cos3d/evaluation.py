"""Volumetric 3D AP with emission-order ranking, plus the grounding score.

The autoregressive decoder emits no confidences, so a prediction's rank is
its position in the emitted sequence.  Predictions sharing a rank (same
position, different images) are tied: they enter the precision/recall curve
together as one point, which keeps the result independent of image order.
AP is the area under the monotone precision envelope (all-point
interpolation).
"""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .codec import DEFAULT_POLICY, CodecError, SerializationPolicy, decode_sequence
from .geometry import Box3D, GeometryError, Rotation
from .iou3d import iou3d_exact

MATCH_EPS = 1e-9

DETECTION_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 11))
GROUNDING_THRESHOLDS = (0.15, 0.25, 0.5)


class Protocol(enum.Enum):
    TARGET_AWARE = "target_aware"
    FIXED_VOCABULARY = "fixed_vocabulary"


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DETECTION_THRESHOLDS
    protocol: Protocol = Protocol.TARGET_AWARE
    uniform_scores: bool = False  # sensitivity mode: every prediction tied

    def __post_init__(self):
        ts = tuple(float(t) for t in self.thresholds)
        if not ts:
            raise ValueError("at least one threshold is required")
        if any(not 0.0 < t <= 1.0 for t in ts):
            raise ValueError(f"thresholds must lie in (0, 1]: {ts}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"thresholds must be strictly increasing: {ts}")
        object.__setattr__(self, "thresholds", ts)

    @classmethod
    def grounding(cls) -> "EvalConfig":
        return cls(GROUNDING_THRESHOLDS)


@dataclass
class DetectionResult:
    image_id: str
    category: str
    predictions: list[Box3D]  # emission order
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class GroundTruth:
    """Boxes per (image, category) and the dataset each image belongs to."""

    boxes: dict[tuple[str, str], list[Box3D]] = field(default_factory=dict)
    dataset_of: dict[str, str] = field(default_factory=dict)

    def add(self, image_id: str, category: str, box: Box3D, dataset: str = "") -> None:
        self.boxes.setdefault((image_id, category), []).append(box)
        self.dataset_of.setdefault(image_id, dataset)

    def categories_of(self, image_id: str) -> set[str]:
        return {c for (img, c), b in self.boxes.items() if img == image_id and b}

    @classmethod
    def from_canonical(cls, lines: Iterable) -> "GroundTruth":
        gt = cls()
        for line in lines:
            gt.dataset_of.setdefault(line.image_path, line.dataset)
            for rec in line.instances:
                gt.add(line.image_path, line.category, rec.box3d, line.dataset)
        return gt


def target_aware_prompts(gt: GroundTruth, images: Optional[Iterable[str]] = None,
                         diagnostics: Optional[list] = None) -> dict[str, set[str]]:
    """Per image, the categories annotated in it; images without any are skipped."""
    images = sorted(gt.dataset_of) if images is None else images
    out = {}
    for img in images:
        cats = gt.categories_of(img)
        if not cats:
            if diagnostics is not None:
                diagnostics.append(f"{img}: no annotations, skipped")
            continue
        out[img] = cats
    return out


def safe_iou(a: Box3D, b: Box3D) -> float:
    """IoU that scores degenerate (zero-volume) predictions as 0."""
    try:
        return iou3d_exact(a, b)
    except GeometryError:
        return 0.0


def iou_matrix(preds: Sequence[Box3D], gts: Sequence[Box3D]) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            m[i, j] = safe_iou(p, g)
    return m


def match_from_matrix(ious: np.ndarray, tau: float) -> tuple[list[bool], int]:
    """Greedy matching in prediction (row) order; returns TP flags and unmatched GTs."""
    n_pred, n_gt = ious.shape
    free = np.ones(n_gt, dtype=bool)
    flags = []
    for i in range(n_pred):
        if not free.any():
            flags.append(False)
            continue
        row = np.where(free, ious[i], -1.0)
        j = int(np.argmax(row))
        if row[j] >= tau - MATCH_EPS:
            free[j] = False
            flags.append(True)
        else:
            flags.append(False)
    return flags, int(free.sum())


def match_greedy(preds: Sequence[Box3D], gts: Sequence[Box3D], tau: float) -> tuple[list[bool], int]:
    return match_from_matrix(iou_matrix(preds, gts), tau)


def ap_from_ranked(ranks: Sequence[int], flags: Sequence[bool], num_gt: int) -> Optional[float]:
    """All-point AP from (rank, TP flag) pairs; equal ranks form a single PR point.

    Returns ``None`` when there is no ground truth (AP undefined).
    """
    if num_gt <= 0:
        return None
    by_rank: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for r, f in zip(ranks, flags):
        by_rank[r][0 if f else 1] += 1
    tp = fp = 0
    recalls, precisions = [0.0], [1.0]
    for r in sorted(by_rank):
        tp += by_rank[r][0]
        fp += by_rank[r][1]
        recalls.append(tp / num_gt)
        precisions.append(tp / (tp + fp))
    prec = np.maximum.accumulate(np.asarray(precisions)[::-1])[::-1]
    rec = np.asarray(recalls)
    return float(np.sum((rec[1:] - rec[:-1]) * prec[1:]))


@dataclass
class _Group:
    """IoUs for one (image, category) pair, computed once and reused for every threshold."""

    ious: np.ndarray
    num_gt: int


def ap_at_threshold(groups: Iterable[_Group], tau: float, uniform_scores: bool = False) -> Optional[float]:
    ranks, flags, num_gt = [], [], 0
    for g in groups:
        f, _ = match_from_matrix(g.ious, tau)
        flags += f
        ranks += [0] * len(f) if uniform_scores else list(range(len(f)))
        num_gt += g.num_gt
    return ap_from_ranked(ranks, flags, num_gt)


@dataclass
class CategoryReport:
    ap_per_threshold: dict[float, float]
    num_gt: int
    num_pred: int

    @property
    def ap(self) -> float:
        return float(np.mean(list(self.ap_per_threshold.values())))


@dataclass
class EvalReport:
    config: EvalConfig
    datasets: dict[str, dict[str, CategoryReport]]
    diagnostics: list[str] = field(default_factory=list)

    def dataset_ap(self, dataset: str) -> float:
        cats = self.datasets[dataset]
        return float(np.mean([c.ap for c in cats.values()])) if cats else float("nan")

    @property
    def mean_ap(self) -> float:
        if not self.datasets:
            return float("nan")
        return float(np.mean([self.dataset_ap(d) for d in sorted(self.datasets)]))

    def to_dict(self) -> dict:
        return {
            "protocol": self.config.protocol.value,
            "thresholds": list(self.config.thresholds),
            "uniform_scores": self.config.uniform_scores,
            "datasets": {
                ds: {
                    "categories": {
                        cat: {
                            "ap": r.ap,
                            "ap_per_threshold": {f"{t:.2f}": v for t, v in r.ap_per_threshold.items()},
                            "num_gt": r.num_gt,
                            "num_pred": r.num_pred,
                        }
                        for cat, r in sorted(self.datasets[ds].items())
                    },
                    "mean_ap": self.dataset_ap(ds),
                }
                for ds in sorted(self.datasets)
            },
            "mean_ap": self.mean_ap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_table(self) -> str:
        rows = [("dataset", "category", "n_gt", "n_pred", "AP3D")]
        for ds in sorted(self.datasets):
            for cat, r in sorted(self.datasets[ds].items()):
                rows.append((ds, cat, str(r.num_gt), str(r.num_pred), f"{100 * r.ap:.2f}"))
            rows.append((ds, "(mean)", "", "", f"{100 * self.dataset_ap(ds):.2f}"))
        rows.append(("(all)", "(mean)", "", "", f"{100 * self.mean_ap:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def ap_sweep(results: Iterable[DetectionResult], gt: GroundTruth,
             config: EvalConfig = EvalConfig()) -> EvalReport:
    """AP per (dataset, category) averaged over thresholds, then over categories, then datasets.

    Categories with ground truth but no predictions score 0.  Predictions for
    a category with no ground truth in that dataset leave AP undefined and
    are reported in diagnostics only.
    """
    diagnostics: list[str] = []
    prompts = target_aware_prompts(gt, diagnostics=diagnostics)
    preds: dict[tuple[str, str], list[Box3D]] = {}
    for res in results:
        key = (res.image_id, res.category)
        if res.image_id not in gt.dataset_of:
            diagnostics.append(f"{res.image_id}: prediction for unknown image ignored")
            continue
        if config.protocol is Protocol.TARGET_AWARE and res.category not in prompts.get(res.image_id, ()):
            diagnostics.append(f"{res.image_id}/{res.category}: not prompted under target-aware protocol")
            continue
        if key in preds:
            diagnostics.append(f"{res.image_id}/{res.category}: duplicate result, later one appended")
        preds.setdefault(key, []).extend(res.predictions)
        diagnostics += [f"{res.image_id}/{res.category}: {d}" for d in res.diagnostics]

    groups: dict[tuple[str, str], list[_Group]] = defaultdict(list)
    counts: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
    for key in sorted(set(gt.boxes) | set(preds)):
        img, cat = key
        g_boxes = gt.boxes.get(key, [])
        p_boxes = preds.get(key, [])
        ds = gt.dataset_of[img]
        groups[(ds, cat)].append(_Group(iou_matrix(p_boxes, g_boxes), len(g_boxes)))
        counts[(ds, cat)][0] += len(g_boxes)
        counts[(ds, cat)][1] += len(p_boxes)

    datasets: dict[str, dict[str, CategoryReport]] = {}
    for (ds, cat), gs in sorted(groups.items()):
        n_gt, n_pred = counts[(ds, cat)]
        if n_gt == 0:
            diagnostics.append(f"{ds}/{cat}: {n_pred} predictions but no ground truth; AP undefined")
            continue
        per_t = {t: ap_at_threshold(gs, t, config.uniform_scores) for t in config.thresholds}
        datasets.setdefault(ds, {})[cat] = CategoryReport(per_t, n_gt, n_pred)
    return EvalReport(config, datasets, diagnostics)


def grounding_score(queries: Sequence[tuple[Optional[Box3D], Sequence[Box3D]]],
                    thresholds: Sequence[float] = GROUNDING_THRESHOLDS) -> dict:
    """Per query the IoU is the maximum over all boxes matching the description.

    A missing (unparsed) prediction is wrong at every threshold.  Returns the
    per-threshold accuracy and their mean under ``"ap"``.
    """
    best = []
    for pred, gts in queries:
        best.append(max((safe_iou(pred, g) for g in gts), default=0.0) if pred is not None else 0.0)
    per_t = {}
    for t in thresholds:
        per_t[float(t)] = (sum(v >= t - MATCH_EPS for v in best) / len(best)) if best else float("nan")
    return {"per_threshold": per_t, "ap": float(np.mean(list(per_t.values()))), "ious": best}


def box_from_json(obj: Mapping) -> Box3D:
    """``{"center", "dims", "rot_matrix" | "euler_zyx" | "yaw"}`` -> Box3D (radians)."""
    if "rot_matrix" in obj:
        rot = Rotation(np.asarray(obj["rot_matrix"], dtype=float).reshape(3, 3))
    elif "euler_zyx" in obj:
        rot = Rotation.from_euler_zyx(*obj["euler_zyx"])
    else:
        rot = Rotation.from_yaw(float(obj.get("yaw", 0.0)))
    return Box3D(obj["center"], obj["dims"], rot)


def result_from_json(obj: Mapping, policy: SerializationPolicy = DEFAULT_POLICY,
                     mode: str = "recover") -> DetectionResult:
    """Build a result from ``response_text`` (decoded) or ``boxes3d`` (pre-decoded)."""
    image_id, category = str(obj["image_id"]), str(obj["category"])
    if "boxes3d" in obj:
        boxes, diags = [], []
        for i, b in enumerate(obj["boxes3d"]):
            try:
                boxes.append(box_from_json(b))
            except (KeyError, TypeError, ValueError) as exc:
                diags.append(f"box {i} unreadable: {exc}")
        return DetectionResult(image_id, category, boxes, diags)
    text = str(obj.get("response_text", ""))
    try:
        seq = decode_sequence(text, policy, mode=mode)
    except CodecError as exc:
        return DetectionResult(image_id, category, [], [f"unparseable response: {exc}"])
    boxes, diags = [], list(seq.diagnostics)
    for inst in seq.instances:
        try:
            boxes.append(inst.box3d())
        except (TypeError, ValueError) as exc:
            diags.append(f"instance without usable 3D box: {exc}")
    return DetectionResult(image_id, category, boxes, diags)


def read_predictions(path, policy: SerializationPolicy = DEFAULT_POLICY,
                     mode: str = "recover") -> list[DetectionResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(result_from_json(json.loads(line), policy, mode))
    return out
