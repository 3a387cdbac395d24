"""Shared value types and box geometry.

Boxes are normalized corner-form ``(x0, y0, x1, y1)`` relative to the owning
image. Pixel coordinates only appear at render and IO boundaries.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

# Slack allowed when validating coordinates produced by float arithmetic.
COORD_EPS = 1e-9


class Origin(str, enum.Enum):
    CURATED = "curated"
    NGRAM = "ngram"


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates: {vals}")
        if min(vals) < -COORD_EPS or max(vals) > 1 + COORD_EPS:
            raise ValueError(f"box outside the unit square: {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"box has no positive area: {vals}")
        # Snap float wobble at the borders back into [0, 1].
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            object.__setattr__(self, name, float(min(1.0, max(0.0, v))))

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> Box:
        if len(xs) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(xs)}")
        return cls(*(float(x) for x in xs))

    def to_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


@dataclass(frozen=True)
class Affine:
    """Per-axis scale followed by translation: ``x' = sx * x + tx``."""

    sx: float = 1.0
    sy: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self) -> None:
        if not (self.sx > 0 and self.sy > 0):
            raise ValueError(f"affine scales must be positive, got ({self.sx}, {self.sy})")

    def inverse(self) -> Affine:
        return Affine(1.0 / self.sx, 1.0 / self.sy, -self.tx / self.sx, -self.ty / self.sy)

    def then(self, outer: Affine) -> Affine:
        """Return ``outer ∘ self`` (apply ``self`` first)."""
        return Affine(
            outer.sx * self.sx,
            outer.sy * self.sy,
            outer.sx * self.tx + outer.tx,
            outer.sy * self.ty + outer.ty,
        )

    def to_list(self) -> list[float]:
        return [self.sx, self.sy, self.tx, self.ty]

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> Affine:
        return cls(*(float(x) for x in xs))


def transform_box(b: Box, affine: Affine) -> Box:
    """Map ``b`` through ``affine``; raises ValueError if the result is not a valid box."""
    coords = (
        affine.sx * b.x0 + affine.tx,
        affine.sy * b.y0 + affine.ty,
        affine.sx * b.x1 + affine.tx,
        affine.sy * b.y1 + affine.ty,
    )
    try:
        return Box(*coords)
    except ValueError as exc:
        raise ValueError(f"affine {affine.to_list()} maps {b.to_list()} to an invalid box") from exc


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """Decoded image plus its alt-text. Pixels are float32, H x W x C, values in [0, 1]."""

    id: str
    pixels: np.ndarray
    alt_text: str = ""
    language: str | None = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image {self.id!r}: pixels must be HxWx1 or HxWx3, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image {self.id!r}: degenerate size {px.shape[:2]}")
        if np.issubdtype(px.dtype, np.integer):
            px = px.astype(np.float32) / float(np.iinfo(px.dtype).max)
        px = np.ascontiguousarray(px, dtype=np.float32)
        if px.size and (px.min() < 0.0 or px.max() > 1.0 or not np.isfinite(px).all()):
            raise ValueError(f"image {self.id!r}: pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.alt_text == other.alt_text
            and self.language == other.language
            and self.pixels.shape == other.pixels.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class PseudoAnnotation:
    box: Box
    label: str
    score: float
    origin: Origin = Origin.NGRAM

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("annotation label must be non-empty")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"annotation score {self.score} outside [0, 1]")
        object.__setattr__(self, "origin", Origin(self.origin))

    def to_dict(self) -> dict[str, Any]:
        return {
            "box": self.box.to_list(),
            "label": self.label,
            "score": self.score,
            "origin": self.origin.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PseudoAnnotation:
        return cls(Box.from_list(d["box"]), d["label"], float(d["score"]), Origin(d["origin"]))


@dataclass(frozen=True)
class AnnotatedImage:
    """Annotations attached to one image.

    ``retained`` is False when the image failed the confidence gate; such
    images never carry annotations.
    """

    image_id: str
    annotations: tuple[PseudoAnnotation, ...] = ()
    retained: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if not self.retained and self.annotations:
            raise ValueError(f"image {self.image_id!r} is dropped but still has annotations")

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "retained": self.retained,
            "annotations": [a.to_dict() for a in self.annotations],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AnnotatedImage:
        return cls(
            d["image_id"],
            tuple(PseudoAnnotation.from_dict(a) for a in d["annotations"]),
            bool(d.get("retained", True)),
        )


@dataclass(frozen=True)
class PipelineConfig:
    keep_threshold: float = 0.1
    image_gate_threshold: float = 0.3
    curated_rescale_factor: float = 0.3
    max_ngram_len: int = 10
    max_num_queries: int = 300
    drop_rate: float = 0.5
    noise_max: float = 0.01
    instance_top_k: int = 512
    grid_sizes_selftrain: tuple[int, ...] = (1, 2, 3, 4, 6)
    grid_sizes_finetune: tuple[int, ...] = (1, 2, 3)
    tile_scale_range: tuple[float, float] = (0.5, 1.0)
    template_count: int = 7
    lr_timescale: int = 10_000
    image_size: int = 1008
    patch_px: int = 14
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid_sizes_selftrain", tuple(int(g) for g in self.grid_sizes_selftrain))
        object.__setattr__(self, "grid_sizes_finetune", tuple(int(g) for g in self.grid_sizes_finetune))
        object.__setattr__(self, "tile_scale_range", tuple(float(s) for s in self.tile_scale_range))
        errors = list(self._violations())
        if errors:
            raise ValueError("invalid PipelineConfig: " + "; ".join(errors))

    def _violations(self) -> Iterable[str]:
        if not (0.0 <= self.keep_threshold <= self.image_gate_threshold):
            yield "need 0 <= keep_threshold <= image_gate_threshold"
        if not (0.0 < self.curated_rescale_factor <= 1.0):
            yield "curated_rescale_factor must be in (0, 1]"
        if self.max_ngram_len < 1 or self.max_num_queries < 1:
            yield "max_ngram_len and max_num_queries must be >= 1"
        if not (0.0 < self.drop_rate < 1.0):
            yield "drop_rate must be in (0, 1)"
        if self.noise_max < 0:
            yield "noise_max must be >= 0"
        if self.instance_top_k < 1:
            yield "instance_top_k must be >= 1"
        for name in ("grid_sizes_selftrain", "grid_sizes_finetune"):
            grids = getattr(self, name)
            if not grids or min(grids) < 1:
                yield f"{name} must be a non-empty list of positive integers"
        lo, hi = self.tile_scale_range if len(self.tile_scale_range) == 2 else (0.0, -1.0)
        if not (0.0 < lo <= hi <= 1.0):
            yield "tile_scale_range must satisfy 0 < lo <= hi <= 1"
        if self.template_count < 1:
            yield "template_count must be >= 1"
        if self.lr_timescale < 1 or self.image_size < 1 or self.patch_px < 1:
            yield "lr_timescale, image_size and patch_px must be positive"
        if not (0 <= self.rng_seed < 2**64):
            yield "rng_seed must be a 64-bit unsigned integer"

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PipelineConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PipelineConfig fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes: Any) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def config_hash(self, extra: Mapping[str, Any] | None = None) -> str:
        payload = {"config": self.to_dict(), "extra": dict(extra or {})}
        return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def stable_hash64(*parts: str | int) -> int:
    """Platform-independent 64-bit hash of the given parts."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def derive_rng(seed: int, *key: str | int) -> np.random.Generator:
    """Independent RNG stream for ``key`` under a global ``seed``.

    Parallel workers use this so results never depend on execution order.
    """
    return np.random.default_rng([seed & (2**64 - 1), stable_hash64(*key)])


__all__ = [
    "AnnotatedImage",
    "Affine",
    "Box",
    "ImageRecord",
    "Origin",
    "PipelineConfig",
    "PseudoAnnotation",
    "canonical_json",
    "derive_rng",
    "iou",
    "stable_hash64",
    "transform_box",
]
