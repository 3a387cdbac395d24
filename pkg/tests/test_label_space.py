import pytest
from hypothesis import given
from hypothesis import strategies as st

from owlst.label_space import (
    QuerySet,
    curated_queries,
    extract_ngrams,
    generic_words,
    merge_curated,
    rescale_curated_scores,
    stopwords,
)
from owlst.types import Box, Origin, PipelineConfig, PseudoAnnotation

from . import oracles


def test_word_lists_match_reference_constants():
    assert stopwords() == oracles.STOPWORDS_EN
    assert generic_words() == oracles.COMMON_GENERIC_WORDS


def test_ngrams_small_example():
    qs = extract_ngrams("A photo of a red dog", image_id="x")
    assert qs.image_id == "x" and qs.source is Origin.NGRAM
    # "photo" is generic; "a", "a of", "a of a", "of", "of a" are stopword-only.
    assert qs.queries == (
        "a of a red", "a of a red dog", "of a red", "of a red dog", "a red", "a red dog", "red", "red dog", "dog",
    )


def test_ngram_orders_and_cap():
    cap = " ".join(f"w{i}" for i in range(40))
    cfg = PipelineConfig(max_num_queries=50, max_ngram_len=3)
    start = extract_ngrams(cap, cfg).queries
    length = extract_ngrams(cap, cfg, order="length").queries
    assert len(start) == len(length) == 50
    assert start[:3] == ("w0", "w0 w1", "w0 w1 w2")
    assert all(" " not in q for q in length[:40])
    with pytest.raises(ValueError):
        extract_ngrams(cap, order="random")


@given(st.lists(st.sampled_from(["dog", "The", "of", "photo", "RED", "a", "jpg", "bus"]), max_size=30))
def test_ngrams_match_reference(words):
    cap = " ".join(words)
    assert list(extract_ngrams(cap).queries) == oracles.get_ngrams(cap)


def test_merge_curated():
    v = merge_curated([["Dog", "dogs", "bus"], ["buses", "glass", "cat"], ["CAT"]])
    assert v.classes == ("bus", "cat", "dog", "glass")
    assert len(v) == 4 and list(v) == list(v.classes)
    assert curated_queries(v, "i").source is Origin.CURATED


@given(st.lists(st.lists(st.text("abes", min_size=1, max_size=5), max_size=8), max_size=3))
def test_merge_curated_matches_reference(lists):
    assert set(merge_curated(lists).classes) == set(oracles.merge_class_lists(*lists))


def test_rescale_only_curated():
    b = Box(0, 0, 1, 1)
    annos = [PseudoAnnotation(b, "x", 0.8, Origin.CURATED), PseudoAnnotation(b, "y", 0.8, Origin.NGRAM)]
    out = rescale_curated_scores(annos, 0.3)
    assert out[0].score == pytest.approx(0.24) and out[1].score == 0.8
    with pytest.raises(ValueError):
        rescale_curated_scores(annos, 0.0)


def test_query_set_round_trip():
    qs = QuerySet("i", ("a", "b"), Origin.NGRAM, negatives=("c",))
    assert QuerySet.from_dict(qs.to_dict()) == qs
    assert "negatives" not in QuerySet("i", ("a",)).to_dict()
    with pytest.raises(ValueError):
        QuerySet("i", ("",))
