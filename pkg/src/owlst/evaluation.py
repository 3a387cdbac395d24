"""Detection AP: greedy IoU matching, 101-point interpolation, old and fixed variants.

``ap_old`` caps detections per image across all classes before evaluating,
so boosting one class's scores can push another class's detections out.
``ap_fixed`` caps per class over the whole evaluation set instead, so
classes never compete.
"""

from __future__ import annotations

import enum
import json
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .types import Box, iou

# Both grids are k / 100 exactly rounded; linspace overshoots some points by
# one ulp, which would miss a recall of 7/20 at the 0.35 point.
RECALL_GRID = np.arange(101) / 100
COCO_IOU_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))


class Bucket(str, enum.Enum):
    RARE = "rare"
    COMMON = "common"
    FREQUENT = "frequent"


class Variant(str, enum.Enum):
    OLD = "old"
    FIXED = "fixed"


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    cls: str
    box: Box


@dataclass(frozen=True)
class Detection:
    image_id: str
    cls: str
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass
class EvalTask:
    ground_truth: Sequence[GroundTruth]
    predictions: Sequence[Detection]
    class_buckets: Mapping[str, Bucket] = field(default_factory=dict)
    iou_thresholds: tuple[float, ...] = COCO_IOU_THRESHOLDS
    # Open-vocabulary outputs may name classes outside the catalog; they still
    # occupy per-image slots under the old variant, so callers can allow them.
    allow_unknown_classes: bool = False

    def __post_init__(self) -> None:
        self.class_buckets = {c: Bucket(b) for c, b in self.class_buckets.items()}
        if self.class_buckets and not self.allow_unknown_classes:
            catalog = set(self.class_buckets) | {g.cls for g in self.ground_truth}
            unknown = sorted({p.cls for p in self.predictions} - catalog)
            if unknown:
                raise ValueError(f"predictions use classes outside the catalog: {unknown[:5]}")

    def gt_classes(self) -> list[str]:
        return sorted({g.cls for g in self.ground_truth})


@dataclass(frozen=True)
class PRCurve:
    """True-positive flags of score-sorted detections for one class and IoU threshold."""

    tp: np.ndarray
    num_gt: int

    @property
    def precision(self) -> np.ndarray:
        return np.cumsum(self.tp) / np.arange(1, self.tp.size + 1)

    @property
    def recall(self) -> np.ndarray:
        return np.cumsum(self.tp) / self.num_gt if self.num_gt else np.zeros(self.tp.size)


@dataclass(frozen=True)
class APResult:
    per_class_ap: dict[str, float]
    ap_all: float
    ap_rare: float
    ap_common: float
    ap_frequent: float
    variant: Variant

    def to_rows(self) -> list[tuple[str, float]]:
        return [
            ("all", self.ap_all),
            ("rare", self.ap_rare),
            ("common", self.ap_common),
            ("frequent", self.ap_frequent),
        ]


def _sort_by_score(dets: Iterable[Detection]) -> list[Detection]:
    # Stable: equal scores keep input order.
    return sorted(dets, key=lambda d: -d.score)


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float],
) -> list[PRCurve]:
    """Greedy matching of one class's detections, one curve per IoU threshold.

    Detections are visited by descending score. Each takes the still-unmatched
    ground truth in its image with the highest IoU at or above the threshold
    (first such ground truth on IoU ties); otherwise it is a false positive.
    """
    dets = _sort_by_score(dets)
    gt_by_image: dict[str, list[Box]] = defaultdict(list)
    for g in gts:
        gt_by_image[g.image_id].append(g.box)
    n_thr = len(iou_thresholds)
    tp = np.zeros((n_thr, len(dets)), dtype=bool)
    matched = {img: np.zeros((n_thr, len(boxes)), dtype=bool) for img, boxes in gt_by_image.items()}
    for di, d in enumerate(dets):
        boxes = gt_by_image.get(d.image_id)
        if not boxes:
            continue
        ious = np.array([iou(d.box, b) for b in boxes])
        used = matched[d.image_id]
        for ti, thr in enumerate(iou_thresholds):
            cand = np.where(used[ti], -1.0, ious)
            best = int(np.argmax(cand))
            if cand[best] >= thr:
                used[ti, best] = True
                tp[ti, di] = True
    return [PRCurve(tp[ti], len(gts)) for ti in range(n_thr)]


def match_and_score(task: EvalTask, cls: str, iou_threshold: float = 0.5) -> PRCurve:
    """Uncapped precision/recall curve of one class at one IoU threshold."""
    dets = [p for p in task.predictions if p.cls == cls]
    gts = [g for g in task.ground_truth if g.cls == cls]
    return match_detections(dets, gts, [iou_threshold])[0]


def average_precision(curve: PRCurve) -> float:
    """COCO-style 101-point interpolated AP; NaN when the class has no ground truth."""
    if curve.num_gt == 0:
        return math.nan
    if curve.tp.size == 0:
        return 0.0
    precision = curve.precision
    recall = curve.recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(q.mean())


def _class_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], thresholds: Sequence[float]) -> float:
    curves = match_detections(dets, gts, thresholds)
    return float(np.mean([average_precision(c) for c in curves]))


def _mean(values: Iterable[float]) -> float:
    vals = list(values)
    return float(np.mean(vals)) if vals else math.nan


def _summarize(task: EvalTask, dets_by_class: Mapping[str, Sequence[Detection]], variant: Variant) -> APResult:
    gts_by_class: dict[str, list[GroundTruth]] = defaultdict(list)
    for g in task.ground_truth:
        gts_by_class[g.cls].append(g)
    per_class = {
        c: _class_ap(dets_by_class.get(c, ()), gts_by_class[c], task.iou_thresholds)
        for c in sorted(gts_by_class)
    }

    def bucket_mean(b: Bucket) -> float:
        return _mean(ap for c, ap in per_class.items() if task.class_buckets.get(c) is b)

    return APResult(
        per_class,
        _mean(per_class.values()),
        bucket_mean(Bucket.RARE),
        bucket_mean(Bucket.COMMON),
        bucket_mean(Bucket.FREQUENT),
        variant,
    )


def ap_old(task: EvalTask, max_dets_per_image: int = 300) -> APResult:
    by_image: dict[str, list[Detection]] = defaultdict(list)
    for p in task.predictions:
        by_image[p.image_id].append(p)
    by_class: dict[str, list[Detection]] = defaultdict(list)
    for img in by_image:
        for p in _sort_by_score(by_image[img])[:max_dets_per_image]:
            by_class[p.cls].append(p)
    return _summarize(task, by_class, Variant.OLD)


def ap_fixed(task: EvalTask, max_dets_per_class: int = 10_000) -> APResult:
    by_class: dict[str, list[Detection]] = defaultdict(list)
    for p in task.predictions:
        by_class[p.cls].append(p)
    capped = {c: _sort_by_score(ds)[:max_dets_per_class] for c, ds in by_class.items()}
    return _summarize(task, capped, Variant.FIXED)


def evaluate(task: EvalTask, variant: Variant | str = Variant.FIXED, **caps: int) -> APResult:
    return ap_fixed(task, **caps) if Variant(variant) is Variant.FIXED else ap_old(task, **caps)


def aggregate_datasets(results: Sequence[float]) -> tuple[float, float]:
    """Mean and median of per-dataset mAPs."""
    if not results:
        raise ValueError("no dataset results to aggregate")
    return float(statistics.fmean(results)), float(statistics.median(results))


def lvis_buckets(image_counts: Mapping[str, int]) -> dict[str, Bucket]:
    """Frequency buckets from the number of images each class appears in
    (rare: 1-10, common: 11-100, frequent: >100)."""
    out = {}
    for c, n in image_counts.items():
        out[c] = Bucket.RARE if n <= 10 else Bucket.COMMON if n <= 100 else Bucket.FREQUENT
    return out


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                r = json.loads(line)
                out.append(Detection(r["image_id"], r["class"], Box.from_list(r["box"]), float(r["score"])))
    return out


def read_ground_truth_jsonl(path: str | Path) -> list[GroundTruth]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                r = json.loads(line)
                out.append(GroundTruth(r["image_id"], r["class"], Box.from_list(r["box"])))
    return out


def write_detections_jsonl(dets: Iterable[Detection], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in dets:
            f.write(json.dumps({"image_id": d.image_id, "class": d.cls, "box": d.box.to_list(), "score": d.score}) + "\n")
