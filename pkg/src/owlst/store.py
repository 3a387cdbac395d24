"""Sharded, streaming record files with per-stage manifests.

Layout::

    <dataset>/<stage>/manifest.json
    <dataset>/<stage>/shard-00000.bin

A shard is a sequence of records, each framed as::

    u8 tag | u32 payload length | payload | u32 CRC-32 of (tag, length, payload)

All integers are little-endian. JSON payloads use sorted keys. Pixel blocks
are ``u32 H | u32 W | u32 C`` followed by float32 values in row-major order.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Iterator, Mapping, Union

import numpy as np

from .label_space import QuerySet
from .mosaic import MosaicExample, TileLayout
from .types import Affine, AnnotatedImage, ImageRecord, PipelineConfig, PseudoAnnotation, canonical_json, stable_hash64

MANIFEST = "manifest.json"
SHARD_PATTERN = "shard-{:05d}.bin"

_FRAME = struct.Struct("<BI")
_U32 = struct.Struct("<I")
_DIMS = struct.Struct("<III")


class StoreError(RuntimeError):
    pass


class RecordType(enum.IntEnum):
    IMAGE = 1
    QUERIES = 2
    ANNOTATIONS = 3
    MOSAIC = 4


class Stage(str, enum.Enum):
    RAW = "raw"
    GT = "gt"
    QUERIED = "queried"
    ANNOTATED = "annotated"
    FILTERED = "filtered"
    MOSAIC = "mosaic"


STAGE_RECORD_TYPE = {
    Stage.RAW: RecordType.IMAGE,
    Stage.GT: RecordType.ANNOTATIONS,
    Stage.QUERIED: RecordType.QUERIES,
    Stage.ANNOTATED: RecordType.ANNOTATIONS,
    Stage.FILTERED: RecordType.ANNOTATIONS,
    Stage.MOSAIC: RecordType.MOSAIC,
}

Record = Union[ImageRecord, QuerySet, AnnotatedImage, MosaicExample]


def shard_of(image_id: str, shard_count: int) -> int:
    if shard_count <= 0:
        raise ValueError("shard_count must be positive")
    return stable_hash64(image_id) % shard_count


def record_id(rec: Record) -> str:
    if isinstance(rec, (ImageRecord, MosaicExample)):
        return rec.id
    return rec.image_id


# -- payload codecs -----------------------------------------------------------


def _pack_json(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


def _pack_pixels(px: np.ndarray) -> bytes:
    h, w, c = px.shape
    return _DIMS.pack(h, w, c) + np.ascontiguousarray(px, dtype="<f4").tobytes()


def _unpack_pixels(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    h, w, c = _DIMS.unpack_from(buf, pos)
    pos += _DIMS.size
    n = h * w * c
    px = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(h, w, c)
    return px, pos + 4 * n


def _with_meta(meta: Mapping[str, Any], *blocks: bytes) -> bytes:
    m = _pack_json(meta)
    return _U32.pack(len(m)) + m + b"".join(blocks)


def _read_meta(buf: memoryview) -> tuple[dict, int]:
    (n,) = _U32.unpack_from(buf, 0)
    return json.loads(bytes(buf[4 : 4 + n])), 4 + n


def encode(rec: Record) -> tuple[RecordType, bytes]:
    if isinstance(rec, ImageRecord):
        meta = {"id": rec.id, "alt_text": rec.alt_text, "language": rec.language}
        return RecordType.IMAGE, _with_meta(meta, _pack_pixels(rec.pixels))
    if isinstance(rec, QuerySet):
        return RecordType.QUERIES, _pack_json(rec.to_dict())
    if isinstance(rec, AnnotatedImage):
        return RecordType.ANNOTATIONS, _pack_json(rec.to_dict())
    if isinstance(rec, MosaicExample):
        meta = {
            "id": rec.id,
            "grid": rec.grid,
            "layout": [[t.tile_index, t.source_id, t.affine.to_list()] for t in rec.layout],
            "annotations": [a.to_dict() for a in rec.annotations],
            "annotation_tiles": list(rec.annotation_tiles),
        }
        mask = np.ascontiguousarray(rec.padding_mask, dtype=np.uint8).tobytes()
        return RecordType.MOSAIC, _with_meta(meta, _pack_pixels(rec.composite), mask)
    raise TypeError(f"cannot store {type(rec).__name__}")


def decode(tag: int, payload: bytes) -> Record:
    buf = memoryview(payload)
    if tag == RecordType.IMAGE:
        meta, pos = _read_meta(buf)
        px, _ = _unpack_pixels(buf, pos)
        return ImageRecord(meta["id"], px, meta["alt_text"], meta["language"])
    if tag == RecordType.QUERIES:
        return QuerySet.from_dict(json.loads(payload))
    if tag == RecordType.ANNOTATIONS:
        return AnnotatedImage.from_dict(json.loads(payload))
    if tag == RecordType.MOSAIC:
        meta, pos = _read_meta(buf)
        px, pos = _unpack_pixels(buf, pos)
        h, w, _ = px.shape
        mask = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos).astype(bool).reshape(h, w)
        px.setflags(write=False)
        mask.setflags(write=False)
        return MosaicExample(
            meta["id"],
            meta["grid"],
            px,
            tuple(TileLayout(i, s, Affine.from_list(a)) for i, s, a in meta["layout"]),
            tuple(PseudoAnnotation.from_dict(a) for a in meta["annotations"]),
            tuple(meta["annotation_tiles"]),
            mask,
        )
    raise StoreError(f"unknown record tag {tag}")


# -- shard files ----------------------------------------------------------------


def frame(tag: int, payload: bytes) -> bytes:
    head = _FRAME.pack(tag, len(payload))
    crc = zlib.crc32(payload, zlib.crc32(head))
    return head + payload + _U32.pack(crc)


class ShardWriter:
    """Append-only writer for one shard file; tracks count and content hash."""

    def __init__(self, path: str | Path, record_type: RecordType | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.record_type = record_type
        self.count = 0
        self._sha = hashlib.sha256()
        self._f: BinaryIO = open(self.path, "wb")

    def write(self, rec: Record) -> None:
        tag, payload = encode(rec)
        if self.record_type is not None and tag != self.record_type:
            raise StoreError(f"{self.path}: expected {self.record_type.name} records, got {RecordType(tag).name}")
        data = frame(tag, payload)
        self._f.write(data)
        self._sha.update(data)
        self.count += 1

    def close(self) -> dict:
        self._f.close()
        return {"file": self.path.name, "records": self.count, "sha256": self._sha.hexdigest()}

    def __enter__(self) -> ShardWriter:
        return self

    def __exit__(self, *exc) -> None:
        if not self._f.closed:
            self._f.close()


def read_shard(path: str | Path, expect: Mapping[str, Any] | None = None) -> Iterator[Record]:
    """Stream records from one shard, validating every CRC.

    With ``expect`` (a manifest shard entry) the record count and content hash
    are checked once the shard has been fully consumed.
    """
    path = Path(path)
    sha = hashlib.sha256()
    index = 0
    with open(path, "rb") as f:
        while True:
            head = f.read(_FRAME.size)
            if not head:
                break
            if len(head) < _FRAME.size:
                raise StoreError(f"{path}: truncated header at record {index}")
            tag, n = _FRAME.unpack(head)
            payload = f.read(n)
            tail = f.read(4)
            if len(payload) < n or len(tail) < 4:
                raise StoreError(f"{path}: truncated record {index}")
            (crc,) = _U32.unpack(tail)
            if zlib.crc32(payload, zlib.crc32(head)) != crc:
                raise StoreError(f"{path}: CRC mismatch at record {index}")
            sha.update(head)
            sha.update(payload)
            sha.update(tail)
            try:
                rec = decode(tag, payload)
            except StoreError:
                raise
            except Exception as exc:
                raise StoreError(f"{path}: cannot decode record {index}: {exc}") from exc
            yield rec
            index += 1
    if expect is not None:
        if index != expect["records"]:
            raise StoreError(f"{path}: manifest lists {expect['records']} records, shard has {index}")
        if sha.hexdigest() != expect["sha256"]:
            raise StoreError(f"{path}: content hash does not match the manifest")


# -- manifests and stages -------------------------------------------------------


@dataclass
class Manifest:
    dataset: str
    stage: Stage
    shard_count: int
    shards: list[dict]
    config: dict
    config_hash: str
    params: dict = field(default_factory=dict)

    @property
    def record_count(self) -> int:
        return sum(s["records"] for s in self.shards)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "stage": self.stage.value,
            "record_type": STAGE_RECORD_TYPE[self.stage].name.lower(),
            "shard_count": self.shard_count,
            "shards": self.shards,
            "record_count": self.record_count,
            "config": self.config,
            "config_hash": self.config_hash,
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Manifest:
        return cls(
            d["dataset"], Stage(d["stage"]), d["shard_count"], list(d["shards"]),
            dict(d["config"]), d["config_hash"], dict(d.get("params", {})),
        )


def stage_dir(dataset_dir: str | Path, stage: Stage | str) -> Path:
    return Path(dataset_dir) / Stage(stage).value


def shard_path(dataset_dir: str | Path, stage: Stage | str, index: int) -> Path:
    return stage_dir(dataset_dir, stage) / SHARD_PATTERN.format(index)


def write_manifest(
    dataset_dir: str | Path,
    stage: Stage | str,
    shards: list[dict],
    config: PipelineConfig,
    params: Mapping[str, Any] | None = None,
) -> Manifest:
    stage = Stage(stage)
    params = dict(params or {})
    m = Manifest(
        Path(dataset_dir).name, stage, len(shards), shards,
        config.to_dict(), config.config_hash({"stage": stage.value, **params}), params,
    )
    path = stage_dir(dataset_dir, stage) / MANIFEST
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return m


def read_manifest(dataset_dir: str | Path, stage: Stage | str) -> Manifest:
    path = stage_dir(dataset_dir, stage) / MANIFEST
    if not path.exists():
        raise StoreError(f"missing manifest {path}")
    m = Manifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    if m.stage is not Stage(stage) or len(m.shards) != m.shard_count:
        raise StoreError(f"{path}: manifest does not describe stage {Stage(stage).value}")
    return m


def write_stage(
    dataset_dir: str | Path,
    stage: Stage | str,
    records: Iterable[Record],
    shard_count: int,
    config: PipelineConfig,
    params: Mapping[str, Any] | None = None,
) -> Manifest:
    """Hash-shard ``records`` by id and write the stage with its manifest."""
    stage = Stage(stage)
    rtype = STAGE_RECORD_TYPE[stage]
    writers = [ShardWriter(shard_path(dataset_dir, stage, i), rtype) for i in range(shard_count)]
    try:
        for rec in records:
            writers[shard_of(record_id(rec), shard_count)].write(rec)
    finally:
        infos = [w.close() for w in writers]
    return write_manifest(dataset_dir, stage, infos, config, params)


def read_stage_shard(dataset_dir: str | Path, stage: Stage | str, index: int, manifest: Manifest | None = None) -> Iterator[Record]:
    manifest = manifest or read_manifest(dataset_dir, stage)
    return read_shard(shard_path(dataset_dir, stage, index), manifest.shards[index])


def read_stage(dataset_dir: str | Path, stage: Stage | str) -> Iterator[Record]:
    manifest = read_manifest(dataset_dir, stage)
    for i in range(manifest.shard_count):
        yield from read_stage_shard(dataset_dir, stage, i, manifest)
