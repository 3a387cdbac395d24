"""Detection query sets: curated vocabulary, per-caption N-grams, combined scoring."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import Iterable, Iterator, Literal, Sequence

from .types import Origin, PipelineConfig, PseudoAnnotation

NgramOrder = Literal["start", "length"]


@lru_cache(maxsize=None)
def _word_list(name: str) -> frozenset[str]:
    text = resources.files("owlst.data").joinpath(name).read_text(encoding="utf-8")
    return frozenset(w for w in text.split("\n") if w)


def stopwords() -> frozenset[str]:
    return _word_list("stopwords_en.txt")


def generic_words() -> frozenset[str]:
    return _word_list("generic_words.txt")


@dataclass(frozen=True)
class CuratedVocabulary:
    classes: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.classes)

    def __iter__(self) -> Iterator[str]:
        return iter(self.classes)


@dataclass(frozen=True)
class QuerySet:
    image_id: str
    queries: tuple[str, ...]
    source: Origin = Origin.NGRAM
    negatives: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        object.__setattr__(self, "source", Origin(self.source))
        if any(not q for q in self.queries):
            raise ValueError(f"query set for {self.image_id!r} contains an empty query")

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id, "queries": list(self.queries), "source": self.source.value}
        if self.negatives:
            d["negatives"] = list(self.negatives)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> QuerySet:
        return cls(d["image_id"], tuple(d["queries"]), Origin(d["source"]), tuple(d.get("negatives", ())))


def merge_curated(lists: Iterable[Iterable[str]]) -> CuratedVocabulary:
    """Union several class-name lists, dropping case duplicates and plural forms.

    A name is removed when the same name without a trailing ``s`` or ``es``
    is also present, so ``["bus", "buses"]`` keeps only ``"bus"``. The result
    is sorted so that shards built from it are reproducible.
    """
    names = {name.lower() for names in lists for name in names}
    plurals = {p for s in names for p in (s + "s", s + "es") if p in names}
    return CuratedVocabulary(tuple(sorted(names - plurals)))


def _ngram_spans(n_words: int, max_len: int, order: NgramOrder) -> Iterator[tuple[int, int]]:
    if order == "start":
        for i in range(n_words):
            for n in range(1, min(max_len, n_words - i) + 1):
                yield i, i + n
    elif order == "length":
        for n in range(1, min(max_len, n_words) + 1):
            for i in range(n_words - n + 1):
                yield i, i + n
    else:
        raise ValueError(f"unknown n-gram order {order!r}")


def extract_ngrams(
    caption: str,
    cfg: PipelineConfig | None = None,
    *,
    image_id: str = "",
    order: NgramOrder = "start",
) -> QuerySet:
    """Word N-gram queries for one caption.

    Generic words are deleted before N-grams are formed, and N-grams made of
    stopwords only are skipped. ``order="start"`` enumerates every length at
    one start position before moving right; ``order="length"`` enumerates all
    unigrams first, then bigrams, and so on. The order matters only once the
    ``max_num_queries`` cap is reached.
    """
    cfg = cfg or PipelineConfig()
    generic = generic_words()
    stop = stopwords()
    words = [w for w in caption.lower().split() if w not in generic]
    queries: list[str] = []
    for i, j in _ngram_spans(len(words), cfg.max_ngram_len, order):
        gram = words[i:j]
        if stop.issuperset(gram):
            continue
        queries.append(" ".join(gram))
        if len(queries) == cfg.max_num_queries:
            break
    return QuerySet(image_id, tuple(queries), Origin.NGRAM)


def curated_queries(vocab: CuratedVocabulary, image_id: str = "") -> QuerySet:
    return QuerySet(image_id, vocab.classes, Origin.CURATED)


def rescale_curated_scores(annos: Sequence[PseudoAnnotation], factor: float) -> list[PseudoAnnotation]:
    if not (0.0 < factor <= 1.0):
        raise ValueError(f"rescale factor must be in (0, 1], got {factor}")
    return [
        replace(a, score=a.score * factor) if a.origin is Origin.CURATED else a
        for a in annos
    ]
