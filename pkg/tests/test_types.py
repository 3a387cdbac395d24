import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from owlst.types import (
    Affine,
    AnnotatedImage,
    Box,
    ImageRecord,
    Origin,
    PipelineConfig,
    PseudoAnnotation,
    derive_rng,
    iou,
    stable_hash64,
    transform_box,
)


@st.composite
def boxes(draw):
    x0, y0 = draw(st.floats(0.0, 0.9)), draw(st.floats(0.0, 0.9))
    w, h = draw(st.floats(1e-3, 1.0 - x0)), draw(st.floats(1e-3, 1.0 - y0))
    return Box(x0, y0, min(1.0, x0 + w), min(1.0, y0 + h))


def test_box_validation():
    with pytest.raises(ValueError):
        Box(0.5, 0.1, 0.4, 0.2)
    with pytest.raises(ValueError):
        Box(0, 0, 1.1, 1)
    with pytest.raises(ValueError):
        Box(0, 0, float("nan"), 1)
    b = Box(-1e-12, 0, 1 + 1e-12, 1)
    assert b.to_list() == [0.0, 0.0, 1.0, 1.0]
    assert Box.from_list(b.to_list()) == b


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == pytest.approx(1.0)


@given(boxes(), st.floats(0.1, 1.0), st.floats(0.1, 1.0), st.floats(0, 0.5), st.floats(0, 0.5))
def test_affine_round_trip(b, sx, sy, tx, ty):
    f = Affine(sx * 0.5, sy * 0.5, tx, ty)
    mapped = transform_box(b, f)
    back = transform_box(mapped, f.inverse())
    np.testing.assert_allclose(back.to_list(), b.to_list(), atol=1e-9)


def test_affine_composition_order():
    inner, outer = Affine(0.5, 0.5, 0.0, 0.0), Affine(0.5, 0.5, 0.5, 0.0)
    b = Box(0.0, 0.0, 1.0, 1.0)
    assert transform_box(b, inner.then(outer)) == transform_box(transform_box(b, inner), outer)
    assert transform_box(b, inner.then(outer)).to_list() == [0.5, 0.0, 0.75, 0.25]


def test_image_record_checks():
    px = np.zeros((4, 5, 3), dtype=np.float32)
    rec = ImageRecord("x", px, "a dog")
    assert (rec.height, rec.width, rec.channels) == (4, 5, 3)
    assert not rec.pixels.flags.writeable
    assert rec == ImageRecord("x", px.copy(), "a dog")
    with pytest.raises(ValueError):
        ImageRecord("x", np.full((2, 2, 3), 1.5, np.float32))
    with pytest.raises(ValueError):
        ImageRecord("x", np.zeros((2, 2, 2), np.float32))


def test_annotation_dict_round_trip():
    a = PseudoAnnotation(Box(0.1, 0.2, 0.3, 0.4), "red dog", 0.7, Origin.CURATED)
    img = AnnotatedImage("i", (a,))
    assert AnnotatedImage.from_dict(img.to_dict()) == img
    with pytest.raises(ValueError):
        AnnotatedImage("i", (a,), retained=False)


def test_config_validation_and_hash():
    cfg = PipelineConfig()
    assert cfg.keep_threshold == 0.1 and cfg.image_gate_threshold == 0.3
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() == PipelineConfig().config_hash()
    assert cfg.config_hash() != cfg.replace(rng_seed=1).config_hash()
    assert cfg.config_hash({"a": 1}) != cfg.config_hash()
    with pytest.raises(ValueError):
        PipelineConfig(keep_threshold=0.5, image_gate_threshold=0.3)
    with pytest.raises(ValueError):
        PipelineConfig(drop_rate=1.0)
    with pytest.raises((TypeError, ValueError)):
        PipelineConfig.from_dict({"no_such_field": 1})


def test_derived_rngs_are_stable_and_independent():
    assert stable_hash64("a", 1) == stable_hash64("a", 1)
    assert stable_hash64("a", 1) != stable_hash64("a1")
    x = derive_rng(0, "k", 1).random(4)
    np.testing.assert_array_equal(x, derive_rng(0, "k", 1).random(4))
    assert not np.array_equal(x, derive_rng(0, "k", 2).random(4))
    assert not np.array_equal(x, derive_rng(1, "k", 1).random(4))
