"""Pseudo-annotation: drive an annotator over query sets and filter its output."""

from __future__ import annotations

import json
import subprocess
import threading
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .label_space import QuerySet
from .types import AnnotatedImage, Box, ImageRecord, PipelineConfig, PseudoAnnotation, derive_rng, iou

PLACEHOLDER = "{}"

# Only the first template is pinned down by the recipe; the other six follow
# the usual CLIP prompt-ensemble style and can be replaced through config.
DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "a photo of the {}",
    "a photo of one {}",
    "a cropped photo of a {}",
    "a close-up photo of a {}",
    "a good photo of a {}",
    "a bright photo of a {}",
)


class AnnotatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class Candidate:
    """One box proposed by an annotator with a score per prompt."""

    box: Box
    scores: np.ndarray


class Annotator(Protocol):
    def __call__(self, image: ImageRecord, prompts: Sequence[str]) -> list[Candidate]: ...


@dataclass(frozen=True)
class TemplateSet:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES

    def __post_init__(self) -> None:
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise ValueError("template set is empty")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ValueError(f"template {t!r} must contain exactly one {PLACEHOLDER!r} placeholder")

    @classmethod
    def for_config(cls, cfg: PipelineConfig, templates: Sequence[str] = DEFAULT_TEMPLATES) -> TemplateSet:
        ts = cls(tuple(templates))
        if len(ts) != cfg.template_count:
            raise ValueError(f"expected {cfg.template_count} templates, got {len(ts)}")
        return ts

    def __len__(self) -> int:
        return len(self.templates)


def expand_templates(query: str, t: TemplateSet) -> list[str]:
    if not query:
        raise ValueError("cannot expand an empty query")
    return [tmpl.replace(PLACEHOLDER, query, 1) for tmpl in t.templates]


def ensemble_scores(per_template_scores: Sequence[float] | np.ndarray, n_templates: int = 7):
    """Mean score over prompt templates.

    Accepts a single vector of ``n_templates`` scores (returns a float) or an
    array whose last axis has ``n_templates`` entries (returns an array).
    """
    s = np.asarray(per_template_scores, dtype=np.float64)
    if s.ndim == 0 or s.shape[-1] != n_templates:
        raise ValueError(f"expected {n_templates} template scores, got shape {s.shape}")
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise ValueError("template scores must lie in [0, 1]")
    out = np.clip(s.mean(axis=-1), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def assign_best_query(box_scores: Sequence[float] | np.ndarray, queries: Sequence[str]) -> tuple[str, float]:
    """Highest-scoring query for one box; ties go to the earliest query."""
    if not queries:
        raise ValueError("no queries to assign")
    s = np.asarray(box_scores, dtype=np.float64)
    if s.shape != (len(queries),):
        raise ValueError(f"score vector shape {s.shape} does not match {len(queries)} queries")
    best = int(np.argmax(s))
    return queries[best], float(s[best])


@dataclass(frozen=True)
class FilterDecision:
    kept: tuple[PseudoAnnotation, ...]
    image_retained: bool


def filter_annotations(annos: Sequence[PseudoAnnotation], cfg: PipelineConfig) -> FilterDecision:
    """Keep annotations scoring at least ``keep_threshold``, but only for images
    whose best annotation reaches ``image_gate_threshold``."""
    if not annos or max(a.score for a in annos) < cfg.image_gate_threshold:
        return FilterDecision((), False)
    return FilterDecision(tuple(a for a in annos if a.score >= cfg.keep_threshold), True)


@dataclass(frozen=True)
class NegativeSample:
    queries: tuple[str, ...]
    short_draw: bool


def sample_pseudo_negatives(
    own_queries: Sequence[str],
    pool: Sequence[str],
    n: int,
    rng: np.random.Generator,
) -> NegativeSample:
    """Draw ``n`` distinct queries from other images' queries.

    Pool strings equal to one of the image's own queries are excluded. When
    fewer than ``n`` remain, all of them are returned and ``short_draw`` is set.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    own = set(own_queries)
    candidates = [q for q in dict.fromkeys(pool) if q not in own]
    if n == 0:
        return NegativeSample((), False)
    if len(candidates) <= n:
        picked = [candidates[i] for i in rng.permutation(len(candidates))]
        return NegativeSample(tuple(picked), len(candidates) < n)
    idx = rng.choice(len(candidates), size=n, replace=False)
    return NegativeSample(tuple(candidates[i] for i in idx), False)


def annotate_candidates(
    img: ImageRecord, qs: QuerySet, annotator: Annotator, templates: TemplateSet
) -> list[PseudoAnnotation]:
    """Unfiltered pseudo-annotations: one per annotator box, labelled by its best query."""
    queries = list(qs.queries)
    if not queries:
        return []
    prompts = [p for q in queries for p in expand_templates(q, templates)]
    try:
        candidates = annotator(img, prompts)
    except Exception as exc:
        raise AnnotatorError(f"annotator failed on image {img.id!r}: {exc}") from exc
    out = []
    for cand in candidates:
        scores = np.asarray(cand.scores, dtype=np.float64)
        if scores.shape != (len(prompts),):
            raise AnnotatorError(
                f"image {img.id!r}: annotator returned {scores.shape} scores for {len(prompts)} prompts"
            )
        per_query = ensemble_scores(scores.reshape(len(queries), len(templates)), len(templates))
        label, score = assign_best_query(per_query, queries)
        out.append(PseudoAnnotation(cand.box, label, score, qs.source))
    return out


def annotate_image(
    img: ImageRecord,
    qs: QuerySet,
    annotator: Annotator,
    templates: TemplateSet,
    cfg: PipelineConfig,
) -> AnnotatedImage:
    decision = filter_annotations(annotate_candidates(img, qs, annotator, templates), cfg)
    return AnnotatedImage(img.id, decision.kept, decision.image_retained)


@dataclass(frozen=True)
class MockNoise:
    """Noise model for the mock annotator.

    ``box_sigma`` is the std-dev of the per-coordinate jitter (normalized
    units), ``score_noise`` the half-width of the uniform noise added to every
    score, ``distractors`` the number of extra random boxes per image.
    """

    box_sigma: float = 0.0
    score_noise: float = 0.0
    distractors: int = 0
    base: float = 1.0

    def to_dict(self) -> dict:
        return {
            "box_sigma": self.box_sigma,
            "score_noise": self.score_noise,
            "distractors": self.distractors,
            "base": self.base,
        }


_MIN_SIDE = 1e-3


def _valid_box(x0: float, y0: float, x1: float, y1: float) -> Box:
    x0, x1 = sorted((min(max(x0, 0.0), 1.0), min(max(x1, 0.0), 1.0)))
    y0, y1 = sorted((min(max(y0, 0.0), 1.0), min(max(y1, 0.0), 1.0)))
    if x1 - x0 < _MIN_SIDE:
        x0 = min(x0, 1.0 - _MIN_SIDE)
        x1 = x0 + _MIN_SIDE
    if y1 - y0 < _MIN_SIDE:
        y0 = min(y0, 1.0 - _MIN_SIDE)
        y1 = y0 + _MIN_SIDE
    return Box(x0, y0, x1, y1)


class MockAnnotator:
    """Seeded stand-in for a neural detector, built from known ground truth.

    Emits one jittered box per ground-truth object plus optional random
    distractors. The score of a box for a prompt is
    ``base * IoU(box, best GT with the prompt's label)`` plus uniform noise,
    clamped to [0, 1]; prompts naming no GT label score zero before noise.
    """

    def __init__(
        self,
        gt: Sequence[tuple[str, Box]],
        noise: MockNoise = MockNoise(),
        templates: TemplateSet | None = None,
        seed: int = 0,
    ):
        self.gt = list(gt)
        self.noise = noise
        self.seed = seed
        ts = templates.templates if templates is not None else DEFAULT_TEMPLATES
        self._labels = sorted({label for label, _ in self.gt})
        self._prompt_label: dict[str, int] = {}
        for li, label in enumerate(self._labels):
            for t in (PLACEHOLDER, *ts):
                self._prompt_label.setdefault(t.replace(PLACEHOLDER, label, 1), li)

    def boxes(self, image_id: str) -> list[Box]:
        rng = derive_rng(self.seed, "mock-boxes", image_id)
        sigma = self.noise.box_sigma
        out = []
        for _, b in self.gt:
            if sigma > 0:
                d = rng.normal(0.0, sigma, size=4)
                out.append(_valid_box(b.x0 + d[0], b.y0 + d[1], b.x1 + d[2], b.y1 + d[3]))
            else:
                out.append(b)
        for _ in range(self.noise.distractors):
            x = rng.uniform(0.0, 1.0, size=2)
            y = rng.uniform(0.0, 1.0, size=2)
            out.append(_valid_box(x[0], y[0], x[1], y[1]))
        return out

    def __call__(self, image: ImageRecord, prompts: Sequence[str]) -> list[Candidate]:
        boxes = self.boxes(image.id)
        if not boxes:
            return []
        # label_iou[b, l]: best IoU of box b with a GT object of label l.
        label_iou = np.zeros((len(boxes), len(self._labels) + 1))
        label_index = {label: i for i, label in enumerate(self._labels)}
        for bi, box in enumerate(boxes):
            for label, g in self.gt:
                li = label_index[label]
                label_iou[bi, li] = max(label_iou[bi, li], iou(box, g))
        cols = np.array([self._prompt_label.get(p, len(self._labels)) for p in prompts], dtype=np.int64)
        scores = self.noise.base * label_iou[:, cols]
        eps = self.noise.score_noise
        if eps > 0:
            rng = derive_rng(self.seed, "mock-scores", image.id)
            scores = scores + rng.uniform(-eps, eps, size=scores.shape)
        scores = np.clip(scores, 0.0, 1.0)
        return [Candidate(b, s) for b, s in zip(boxes, scores)]


def mock_annotator(scene, noise: MockNoise = MockNoise(), templates: TemplateSet | None = None, seed: int = 0) -> MockAnnotator:
    """Mock annotator for a synthetic scene (anything with a ``gt`` list of ``(label, Box)``)."""
    return MockAnnotator(scene.gt, noise, templates, seed)


class ExternalAnnotator:
    """Annotator living in a child process, spoken to in JSON lines.

    Each request line is ``{"image_id": ..., "queries": [...]}`` and each
    reply line ``{"boxes": [[x0, y0, x1, y1], ...], "scores": [[...], ...]}``
    with one score row per box and one column per query. Calls are
    serialized, so one instance may be shared between threads.
    """

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._lock = threading.Lock()

    def __call__(self, image: ImageRecord, prompts: Sequence[str]) -> list[Candidate]:
        request = json.dumps({"image_id": image.id, "queries": list(prompts)})
        with self._lock:
            if self._proc.poll() is not None:
                raise AnnotatorError(f"external annotator exited with code {self._proc.returncode}")
            assert self._proc.stdin is not None and self._proc.stdout is not None
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        if not line:
            raise AnnotatorError("external annotator closed its output")
        reply = json.loads(line)
        boxes, scores = reply.get("boxes", []), reply.get("scores", [])
        if len(boxes) != len(scores):
            raise AnnotatorError(f"external annotator sent {len(boxes)} boxes but {len(scores)} score rows")
        out = []
        for b, s in zip(boxes, scores):
            s = np.asarray(s, dtype=np.float64)
            if s.shape != (len(prompts),) or (s.size and (s.min() < 0 or s.max() > 1)):
                raise AnnotatorError("external annotator sent a malformed score row")
            out.append(Candidate(Box.from_list(b), s))
        return out

    def close(self) -> None:
        if self._proc.poll() is None:
            assert self._proc.stdin is not None
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self) -> ExternalAnnotator:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
