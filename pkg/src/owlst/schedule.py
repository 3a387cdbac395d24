"""Learning-rate schedule and weight-space checkpoint ensembling."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float
    timescale: int = 10_000
    cooldown_start: int | None = None
    cooldown_steps: int | None = None

    def __post_init__(self) -> None:
        if self.peak_lr <= 0 or self.timescale <= 0:
            raise ValueError("peak_lr and timescale must be positive")
        if (self.cooldown_start is None) != (self.cooldown_steps is None):
            raise ValueError("cooldown_start and cooldown_steps go together")
        if self.cooldown_start is not None and (self.cooldown_start < 0 or self.cooldown_steps <= 0):
            raise ValueError("cooldown_start must be >= 0 and cooldown_steps > 0")


def lr_at(step: int, s: ScheduleConfig) -> float:
    """Inverse square-root decay after a constant plateau, with optional linear cooldown."""
    if step < 0:
        raise ValueError("step must be >= 0")
    lr = s.peak_lr * math.sqrt(s.timescale / max(step, s.timescale))
    if s.cooldown_start is not None and step >= s.cooldown_start:
        lr *= max(0.0, 1.0 - (step - s.cooldown_start) / s.cooldown_steps)
    return lr


class CheckpointMismatchError(ValueError):
    def __init__(self, names: list[str], detail: str):
        self.names = names
        super().__init__(f"{detail}: {', '.join(names)}")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Named parameter arrays (float32 or float64)."""

    params: Mapping[str, np.ndarray]

    def __post_init__(self) -> None:
        fixed = {}
        for name, arr in self.params.items():
            arr = np.asarray(arr)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
            fixed[name] = arr
        object.__setattr__(self, "params", fixed)

    def bit_equal(self, other: Checkpoint) -> bool:
        if set(self.params) != set(other.params):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in ((self.params[n], other.params[n]) for n in self.params)
        )


def weight_average(a: Checkpoint, b: Checkpoint, alpha: float) -> Checkpoint:
    """Interpolate parameters: ``(1 - alpha) * a + alpha * b``.

    ``alpha`` is the weight of ``b`` (the fine-tuned checkpoint). The end
    points return the corresponding input unchanged.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    names_a, names_b = set(a.params), set(b.params)
    if names_a != names_b:
        raise CheckpointMismatchError(sorted(names_a ^ names_b), "parameter names differ")
    bad = sorted(n for n in names_a if a.params[n].shape != b.params[n].shape)
    if bad:
        raise CheckpointMismatchError(bad, "parameter shapes differ")
    if alpha == 0.0:
        return Checkpoint({n: v.copy() for n, v in a.params.items()})
    if alpha == 1.0:
        return Checkpoint({n: v.copy() for n, v in b.params.items()})
    out = {}
    for n, va in a.params.items():
        vb = b.params[n]
        dtype = np.result_type(va, vb)
        mixed = (1.0 - alpha) * va.astype(np.float64) + alpha * vb.astype(np.float64)
        out[n] = mixed.astype(dtype)
    return Checkpoint(out)


_MAGIC = b"OWLCKPT\x01"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write ``MAGIC | u32 header length | JSON header | little-endian payloads``.

    Parameters are laid out in name order; offsets in the header are relative
    to the start of the payload section.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        dtype = str(arr.dtype)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format": "owlst-checkpoint", "version": 1, "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(data[start : start + hlen])
    payload = memoryview(data)[start + hlen :]
    params = {}
    for e in header["params"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(payload):
            raise ValueError(f"{path}: parameter {e['name']!r} has an inconsistent size")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"])
        params[e["name"]] = arr.astype(e["dtype"]).reshape(e["shape"])
    return Checkpoint(params)
