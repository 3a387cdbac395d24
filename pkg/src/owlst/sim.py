"""Synthetic scenes with known ground truth for exercising the full pipeline.

Scenes are flat shapes on a plain background with a templated caption that
names every object, e.g. ``"a photo of a red circle and a blue square"``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .annotate import MockAnnotator, MockNoise, TemplateSet, annotate_candidates, filter_annotations
from .evaluation import Bucket, Detection, EvalTask, GroundTruth, lvis_buckets
from .label_space import extract_ngrams
from .types import AnnotatedImage, Box, ImageRecord, PipelineConfig, PseudoAnnotation, derive_rng, iou

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.1, 0.8),
    "orange": (1.0, 0.55, 0.0),
}
SHAPES = ("square", "circle", "triangle")
BACKGROUND = (0.5, 0.5, 0.5)
_GRID = 3  # objects are placed in distinct cells of a 3x3 layout, so they never overlap


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    image: ImageRecord
    gt: tuple[tuple[str, Box], ...]
    caption: str

    @property
    def id(self) -> str:
        return self.image.id


def _shape_mask(shape: str, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        r = s / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if shape == "triangle":
        return np.abs(xx - s / 2) <= yy / 2
    raise ValueError(f"unknown shape {shape!r}")


def caption_for(labels: Sequence[str]) -> str:
    distinct = list(dict.fromkeys(labels))
    return "a photo of " + " and ".join(f"{'an' if label[0] in 'aeiou' else 'a'} {label}" for label in distinct)


def generate_scene(
    index: int,
    seed: int = 0,
    size: int = 64,
    colors: Sequence[str] = tuple(COLORS),
    shapes: Sequence[str] = SHAPES,
) -> SyntheticScene:
    rng = derive_rng(seed, "scene", index)
    cell = size // _GRID
    if cell < 4:
        raise ValueError(f"scene size {size} is too small")
    n = int(rng.integers(1, 7))
    cells = rng.choice(_GRID * _GRID, size=n, replace=False)
    px = np.empty((size, size, 3), dtype=np.float32)
    px[:] = BACKGROUND
    gt = []
    for c in cells:
        color = colors[int(rng.integers(len(colors)))]
        shape = shapes[int(rng.integers(len(shapes)))]
        s = int(rng.integers(max(4, cell // 2), cell + 1))
        r0, c0 = divmod(int(c), _GRID)
        y = r0 * cell + int(rng.integers(0, cell - s + 1))
        x = c0 * cell + int(rng.integers(0, cell - s + 1))
        region = px[y : y + s, x : x + s]
        region[_shape_mask(shape, s)] = COLORS[color]
        gt.append((f"{color} {shape}", Box(x / size, y / size, (x + s) / size, (y + s) / size)))
    image = ImageRecord(f"scene-{index:06d}", px, caption_for([g[0] for g in gt]), "en")
    return SyntheticScene(image, tuple(gt), image.alt_text)


def generate_scenes(n: int, seed: int = 0, size: int = 64, **kw) -> list[SyntheticScene]:
    if n < 0:
        raise ValueError("n must be >= 0")
    return [generate_scene(i, seed, size, **kw) for i in range(n)]


def scene_buckets(scenes: Sequence[SyntheticScene]) -> dict[str, Bucket]:
    counts = Counter(label for s in scenes for label in {g[0] for g in s.gt})
    return lvis_buckets(counts)


def annotate_scenes(
    scenes: Sequence[SyntheticScene],
    noise: MockNoise = MockNoise(),
    cfg: PipelineConfig | None = None,
    templates: TemplateSet | None = None,
    seed: int = 0,
) -> dict[str, list[PseudoAnnotation]]:
    """Unfiltered best-query annotations per scene from the mock annotator."""
    cfg = cfg or PipelineConfig()
    templates = templates or TemplateSet()
    out = {}
    for scene in scenes:
        qs = extract_ngrams(scene.caption, cfg, image_id=scene.id)
        ann = MockAnnotator(scene.gt, noise, templates, seed)
        out[scene.id] = annotate_candidates(scene.image, qs, ann, templates)
    return out


def run_pipeline(
    scenes: Sequence[SyntheticScene],
    cfg: PipelineConfig | None = None,
    noise: MockNoise = MockNoise(),
    templates: TemplateSet | None = None,
    seed: int = 0,
) -> list[AnnotatedImage]:
    """Queries, annotation and filtering for every scene (dropped images included)."""
    cfg = cfg or PipelineConfig()
    cands = annotate_scenes(scenes, noise, cfg, templates, seed)
    out = []
    for scene in scenes:
        d = filter_annotations(cands[scene.id], cfg)
        out.append(AnnotatedImage(scene.id, d.kept, d.image_retained))
    return out


def eval_task(scenes: Sequence[SyntheticScene], annotated: Sequence[AnnotatedImage]) -> EvalTask:
    gts = [GroundTruth(s.id, label, box) for s in scenes for label, box in s.gt]
    dets = [Detection(a.image_id, p.label, p.box, p.score) for a in annotated for p in a.annotations]
    return EvalTask(gts, dets, scene_buckets(scenes))


def _count_true_positives(
    kept: Sequence[PseudoAnnotation], gt: Sequence[tuple[str, Box]], iou_threshold: float
) -> int:
    used = [False] * len(gt)
    tp = 0
    for a in sorted(kept, key=lambda a: -a.score):
        best, best_iou = -1, iou_threshold
        for gi, (label, box) in enumerate(gt):
            if used[gi] or label != a.label:
                continue
            v = iou(a.box, box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = gi, v
        if best >= 0:
            used[best] = True
            tp += 1
    return tp


@dataclass(frozen=True)
class SweepRow:
    gate: float
    keep: float
    precision: float
    recall: float
    images_retained: int
    annotations_kept: int

    def as_csv(self) -> str:
        return f"{self.gate:g},{self.keep:g},{self.precision:.6f},{self.recall:.6f},{self.images_retained},{self.annotations_kept}"


SWEEP_HEADER = "gate,keep,precision,recall,images_retained,annotations_kept"


def run_threshold_sweep(
    scenes: Sequence[SyntheticScene],
    gates: Sequence[float],
    noise: MockNoise = MockNoise(),
    *,
    keep_threshold: float | None = None,
    cfg: PipelineConfig | None = None,
    templates: TemplateSet | None = None,
    seed: int = 0,
    iou_threshold: float = 0.5,
) -> list[SweepRow]:
    """Precision/recall of kept pseudo-annotations for each image-gate value.

    Each scene is annotated once; only the filter is re-run per gate. By
    default the keep threshold follows the gate (a single confidence
    threshold); pass ``keep_threshold`` to hold it fixed (capped at the gate).
    Precision is NaN when nothing is kept.
    """
    cfg = cfg or PipelineConfig()
    cands = annotate_scenes(scenes, noise, cfg, templates, seed)
    total_gt = sum(len(s.gt) for s in scenes)
    rows = []
    for gate in gates:
        keep = gate if keep_threshold is None else min(keep_threshold, gate)
        gcfg = replace(cfg, keep_threshold=keep, image_gate_threshold=gate)
        tp = kept = retained = 0
        for scene in scenes:
            d = filter_annotations(cands[scene.id], gcfg)
            retained += d.image_retained
            kept += len(d.kept)
            tp += _count_true_positives(d.kept, scene.gt, iou_threshold)
        precision = tp / kept if kept else math.nan
        recall = tp / total_gt if total_gt else math.nan
        rows.append(SweepRow(float(gate), float(keep), precision, recall, retained, kept))
    return rows


def mean_box_iou(scenes: Sequence[SyntheticScene], noise: MockNoise, seed: int = 0) -> float:
    """Mean IoU between the mock annotator's jittered boxes and their source GT boxes."""
    vals = []
    for scene in scenes:
        boxes = MockAnnotator(scene.gt, noise, seed=seed).boxes(scene.id)
        vals.extend(iou(b, g) for b, (_, g) in zip(boxes, scene.gt))
    return float(np.mean(vals)) if vals else math.nan
