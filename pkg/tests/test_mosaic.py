from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owlst.mosaic import (
    MosaicPlan,
    assemble_mosaic,
    expected_images_per_example,
    mosaic_stream,
    plan_mosaics,
    resize_pad_tile,
)
from owlst.types import AnnotatedImage, Box, ImageRecord, PipelineConfig, PseudoAnnotation


def _img(id, h, w, c=3, value=0.5):
    return ImageRecord(id, np.full((h, w, c), value, np.float32))


def test_expected_tiles():
    assert expected_images_per_example([1, 2, 3, 4, 6]) == Fraction(66, 5)
    assert expected_images_per_example([1, 2, 3]) == Fraction(14, 3)
    with pytest.raises(ValueError):
        expected_images_per_example([])


def test_plans_consume_ids_in_order():
    ids = [f"i{k}" for k in range(50)]
    plans = list(plan_mosaics(ids, [2, 3], (0.5, 1.0), np.random.default_rng(0)))
    flat = [i for p in plans for i in p.tile_assignments]
    assert [i for i in flat if i is not None] == ids
    assert all(i is None for i in flat[len(ids):])
    assert all(0.5 <= s <= 1.0 for p in plans for s in p.scales)
    with pytest.raises(ValueError):
        MosaicPlan(2, ("a",), (1.0,))


def test_resize_pad_wide_and_tall():
    tile, aff, (cw, ch) = resize_pad_tile(_img("w", 10, 40), 100, 100, 0.5)
    assert (cw, ch) == (50, 12)  # round(12.5) == 12
    assert tile.shape == (100, 100, 3)
    assert tile[:ch, :cw].min() > 0 and tile[ch:].max() == 0 and tile[:, cw:].max() == 0
    assert (aff.sx, aff.sy) == (cw / 100, ch / 100)
    # Too tall at the requested width: shrink to the tile height.
    _, _, (cw, ch) = resize_pad_tile(_img("t", 80, 20), 50, 40, 1.0)
    assert ch == 40 and cw == 10


def test_assemble_remaps_boxes_exactly():
    imgs = {k: _img(k, 32, 32, value=0.2 + 0.1 * n) for n, k in enumerate("abcd")}
    b = Box(0.25, 0.25, 0.75, 0.75)
    annos = {k: AnnotatedImage(k, (PseudoAnnotation(b, k, 0.9),)) for k in "abcd"}
    plan = MosaicPlan(2, ("a", "b", "c", "d"), (1.0, 1.0, 0.5, 0.5))
    ex = assemble_mosaic(plan, imgs, annos, 64)
    assert ex.composite.shape == (64, 64, 3)
    boxes = {a.label: a.box.to_list() for a in ex.annotations}
    assert boxes["a"] == [0.125, 0.125, 0.375, 0.375]
    assert boxes["b"] == [0.625, 0.125, 0.875, 0.375]
    assert boxes["c"] == [0.0625, 0.5625, 0.1875, 0.6875]
    # Padding covers the unused part of the half-scale tiles.
    assert ex.padding_mask[:32].sum() == 0
    assert ex.padding_mask[32:].sum() == 2 * (32 * 32 - 16 * 16)
    back = ex.source_annotations()
    for k in "abcd":
        np.testing.assert_allclose(back[k][0].box.to_list(), b.to_list(), atol=1e-12)


def test_assemble_skips_dropped_and_rejects_unknown():
    imgs = {"a": _img("a", 8, 8)}
    plan = MosaicPlan(1, ("a",), (1.0,))
    dropped = {"a": AnnotatedImage("a", (), retained=False)}
    assert assemble_mosaic(plan, imgs, dropped, 16).annotations == ()
    with pytest.raises(KeyError):
        assemble_mosaic(MosaicPlan(1, ("zz",), (1.0,)), imgs, {}, 16)


@settings(max_examples=40)
@given(
    st.sampled_from([1, 2, 3, 4, 6]),
    st.integers(8, 64),
    st.integers(8, 64),
    st.integers(0, 2**31),
)
def test_remap_round_trip_property(grid, h, w, seed):
    rng = np.random.default_rng(seed)
    ids = [f"i{k}" for k in range(grid * grid)]
    imgs = {i: _img(i, int(rng.integers(4, 40)), int(rng.integers(4, 40))) for i in ids}
    annos = {}
    for i in ids:
        x0, y0 = rng.uniform(0, 0.5, size=2)
        annos[i] = [PseudoAnnotation(Box(x0, y0, x0 + 0.3, y0 + 0.4), "x", 0.5)]
    plan = MosaicPlan(grid, tuple(ids), tuple(rng.uniform(0.5, 1.0, size=grid * grid)))
    ex = assemble_mosaic(plan, imgs, annos, (w * grid, h * grid))
    back = ex.source_annotations()
    for i in ids:
        np.testing.assert_allclose(back[i][0].box.to_list(), annos[i][0].box.to_list(), atol=1e-9)
    for a, ti in zip(ex.annotations, ex.annotation_tiles):
        r, c = divmod(ti, grid)
        # Each remapped box stays within its own tile.
        assert a.box.x0 >= c / grid - 1e-9 and a.box.y0 >= r / grid - 1e-9


def test_stream_is_seeded():
    cfg = PipelineConfig(image_size=56)
    imgs = [_img(f"i{k}", 10, 12) for k in range(20)]
    a = list(mosaic_stream(imgs, {}, cfg, np.random.default_rng(1)))
    b = list(mosaic_stream(imgs, {}, cfg, np.random.default_rng(1)))
    assert a == b
    assert sum(len(e.layout) for e in a) == 20
    ft = list(mosaic_stream(imgs, {}, cfg, np.random.default_rng(1), finetune=True))
    assert {e.grid for e in ft} <= {1, 2, 3}


def test_grayscale_tiles_broadcast():
    imgs = {"g": _img("g", 8, 8, c=1), "c": _img("c", 8, 8)}
    ex = assemble_mosaic(MosaicPlan(2, ("g", "c", None, None), (1.0,) * 4), imgs, {}, 16)
    assert ex.composite.shape == (16, 16, 3)
    assert ex.padding_mask[8:].all()
