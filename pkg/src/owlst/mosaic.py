"""Grid mosaics of raw images with resize-and-pad tiles and exact box remapping."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Mapping, Sequence

import cv2
import numpy as np

from .types import Affine, AnnotatedImage, ImageRecord, PipelineConfig, PseudoAnnotation, transform_box


@dataclass(frozen=True)
class MosaicPlan:
    """Grid size, row-major tile sources and per-tile width scale.

    ``None`` marks an empty (fully padded) tile, used only when a stream of
    images runs out part-way through a grid.
    """

    grid: int
    tile_assignments: tuple[str | None, ...]
    scales: tuple[float, ...]

    def __post_init__(self) -> None:
        n = self.grid * self.grid
        if self.grid < 1 or len(self.tile_assignments) != n or len(self.scales) != n:
            raise ValueError(f"grid {self.grid} needs exactly {n} assignments and scales")

    @property
    def image_ids(self) -> list[str]:
        return [i for i in self.tile_assignments if i is not None]

    def to_dict(self) -> dict:
        return {"grid": self.grid, "tile_assignments": list(self.tile_assignments), "scales": list(self.scales)}


@dataclass(frozen=True)
class TileLayout:
    tile_index: int
    source_id: str
    affine: Affine  # source unit square -> composite unit square


@dataclass(frozen=True, eq=False)
class MosaicExample:
    id: str
    grid: int
    composite: np.ndarray
    layout: tuple[TileLayout, ...]
    annotations: tuple[PseudoAnnotation, ...]
    annotation_tiles: tuple[int, ...]
    padding_mask: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MosaicExample):
            return NotImplemented
        return (
            self.id == other.id
            and self.grid == other.grid
            and self.layout == other.layout
            and self.annotations == other.annotations
            and self.annotation_tiles == other.annotation_tiles
            and self.composite.shape == other.composite.shape
            and self.composite.tobytes() == other.composite.tobytes()
            and np.array_equal(self.padding_mask, other.padding_mask)
        )

    __hash__ = None  # type: ignore[assignment]

    def tile(self, tile_index: int) -> TileLayout:
        for t in self.layout:
            if t.tile_index == tile_index:
                return t
        raise KeyError(tile_index)

    def source_annotations(self) -> dict[str, list[PseudoAnnotation]]:
        """Map every annotation back to its source image coordinates."""
        out: dict[str, list[PseudoAnnotation]] = {t.source_id: [] for t in self.layout}
        for a, ti in zip(self.annotations, self.annotation_tiles):
            t = self.tile(ti)
            out[t.source_id].append(
                PseudoAnnotation(transform_box(a.box, t.affine.inverse()), a.label, a.score, a.origin)
            )
        return out


def expected_images_per_example(grids: Sequence[int]) -> Fraction:
    """Mean number of tiles when grid sizes are drawn in equal proportions."""
    if not grids:
        raise ValueError("empty grid set")
    return Fraction(sum(g * g for g in grids), len(grids))


def sample_grid(grids: Sequence[int], rng: np.random.Generator) -> int:
    if not grids:
        raise ValueError("empty grid set")
    return int(grids[int(rng.integers(len(grids)))])


def _tile_edges(total: int, g: int) -> list[int]:
    # The last row/column absorbs any remainder pixels.
    base = total // g
    return [i * base for i in range(g)] + [total]


def plan_mosaics(
    image_ids: Sequence[str],
    grids: Sequence[int],
    scale_range: tuple[float, float],
    rng: np.random.Generator,
) -> Iterator[MosaicPlan]:
    """Consume ``image_ids`` in order, one independently sampled grid per plan."""
    lo, hi = scale_range
    pos = 0
    while pos < len(image_ids):
        g = sample_grid(grids, rng)
        n = g * g
        ids: list[str | None] = list(image_ids[pos : pos + n])
        pos += n
        ids += [None] * (n - len(ids))
        scales = tuple(float(s) for s in rng.uniform(lo, hi, size=n))
        yield MosaicPlan(g, tuple(ids), scales)


def resize_pad_tile(
    img: ImageRecord, tile_w: int, tile_h: int, scale: float
) -> tuple[np.ndarray, Affine, tuple[int, int]]:
    """Resize ``img`` to ``scale`` times the tile width and pad bottom/right.

    Aspect ratio is preserved. If the resulting height overflows the tile, the
    image is shrunk to fit the tile height instead. Returns the padded tile,
    the affine from source-normalized to tile-normalized coordinates, and the
    content size ``(width, height)`` in pixels.
    """
    if not (0.0 < scale <= 1.0):
        raise ValueError(f"tile scale must be in (0, 1], got {scale}")
    if tile_w < 1 or tile_h < 1:
        raise ValueError("tile must be at least one pixel")
    h, w = img.height, img.width
    new_w = max(1, int(round(scale * tile_w)))
    new_h = max(1, int(round(new_w * h / w)))
    if new_h > tile_h:
        new_h = tile_h
        new_w = max(1, min(tile_w, int(round(tile_h * w / h))))
    src = img.pixels
    if (new_w, new_h) == (w, h):
        content = np.array(src, dtype=np.float32)
    else:
        interp = cv2.INTER_AREA if new_w < w and new_h < h else cv2.INTER_LINEAR
        content = cv2.resize(src, (new_w, new_h), interpolation=interp)
        if content.ndim == 2:
            content = content[:, :, None]
        content = np.clip(content, 0.0, 1.0).astype(np.float32)
    tile = np.zeros((tile_h, tile_w, img.channels), dtype=np.float32)
    tile[:new_h, :new_w] = content
    return tile, Affine(new_w / tile_w, new_h / tile_h, 0.0, 0.0), (new_w, new_h)


def assemble_mosaic(
    plan: MosaicPlan,
    images: Mapping[str, ImageRecord],
    annotations: Mapping[str, AnnotatedImage | Sequence[PseudoAnnotation]],
    size: int | tuple[int, int],
    example_id: str = "",
) -> MosaicExample:
    """Render a plan into a composite and remap the tiles' annotations.

    ``size`` is the composite resolution (square int or ``(width, height)``).
    Images missing from ``annotations`` contribute no boxes; so do images
    whose AnnotatedImage was not retained.
    """
    width, height = (size, size) if isinstance(size, int) else size
    g = plan.grid
    if width < g or height < g:
        raise ValueError(f"composite {width}x{height} is too small for a {g}x{g} grid")
    for sid in plan.image_ids:
        if sid not in images:
            raise KeyError(f"mosaic plan references unknown image {sid!r}")
    channels = max((images[s].channels for s in plan.image_ids), default=3)
    composite = np.zeros((height, width, channels), dtype=np.float32)
    padding = np.ones((height, width), dtype=bool)
    xs, ys = _tile_edges(width, g), _tile_edges(height, g)
    layout: list[TileLayout] = []
    annos: list[PseudoAnnotation] = []
    anno_tiles: list[int] = []
    for ti, (sid, scale) in enumerate(zip(plan.tile_assignments, plan.scales)):
        if sid is None:
            continue
        r, c = divmod(ti, g)
        x0, x1, y0, y1 = xs[c], xs[c + 1], ys[r], ys[r + 1]
        tw, th = x1 - x0, y1 - y0
        tile, content_affine, (cw, ch) = resize_pad_tile(images[sid], tw, th, scale)
        composite[y0:y1, x0:x1] = tile  # broadcasts single-channel tiles
        padding[y0 : y0 + ch, x0 : x0 + cw] = False
        placement = Affine(tw / width, th / height, x0 / width, y0 / height)
        affine = content_affine.then(placement)
        layout.append(TileLayout(ti, sid, affine))
        src = annotations.get(sid, ())
        if isinstance(src, AnnotatedImage):
            src = src.annotations if src.retained else ()
        for a in src:
            annos.append(PseudoAnnotation(transform_box(a.box, affine), a.label, a.score, a.origin))
            anno_tiles.append(ti)
    composite.setflags(write=False)
    padding.setflags(write=False)
    return MosaicExample(example_id, g, composite, tuple(layout), tuple(annos), tuple(anno_tiles), padding)


def mosaic_stream(
    images: Sequence[ImageRecord],
    annotations: Mapping[str, AnnotatedImage],
    cfg: PipelineConfig,
    rng: np.random.Generator,
    *,
    finetune: bool = False,
    id_prefix: str = "mosaic",
) -> Iterator[MosaicExample]:
    grids = cfg.grid_sizes_finetune if finetune else cfg.grid_sizes_selftrain
    by_id = {im.id: im for im in images}
    plans = plan_mosaics([im.id for im in images], grids, cfg.tile_scale_range, rng)
    for k, plan in enumerate(plans):
        yield assemble_mosaic(plan, by_id, annotations, cfg.image_size, f"{id_prefix}-{k:06d}")
