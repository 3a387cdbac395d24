"""Model-free token procedures: patch-variance dropping and top-k instance selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class PatchGrid:
    rows: int
    cols: int
    patch_px: int
    variances: np.ndarray  # rows x cols

    @property
    def size(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True, eq=False)
class DropMask:
    keep: np.ndarray  # rows x cols bool

    @property
    def kept_count(self) -> int:
        return int(self.keep.sum())


@dataclass(frozen=True, eq=False)
class InstanceSelection:
    selected_indices: np.ndarray
    objectness_targets: np.ndarray


def patch_variances(
    pixels: np.ndarray,
    patch_px: int,
    noise_max: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PatchGrid:
    """Per-patch pixel variance, pooled over all channels.

    Uniform noise in ``[0, noise_max]`` is added to every pixel first to break
    ties between flat patches. Images whose sides are not multiples of
    ``patch_px`` are zero-padded on the bottom/right.
    """
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    rows, cols = -(-h // patch_px), -(-w // patch_px)
    if (rows * patch_px, cols * patch_px) != (h, w):
        padded = np.zeros((rows * patch_px, cols * patch_px, c))
        padded[:h, :w] = px
        px = padded
    if noise_max > 0:
        if rng is None:
            raise ValueError("noise_max > 0 needs an rng")
        px = px + rng.uniform(0.0, noise_max, size=px.shape)
    blocks = px.reshape(rows, patch_px, cols, patch_px, c).transpose(0, 2, 1, 3, 4)
    variances = blocks.reshape(rows, cols, -1).var(axis=-1)
    return PatchGrid(rows, cols, patch_px, variances)


def kept_patch_count(n: int, drop_rate: float) -> int:
    # round() guards against float error such as 10 * (1 - 0.7) = 3.0000000000000004
    return math.ceil(round(n * (1.0 - drop_rate), 9))


def drop_mask(grid: PatchGrid, drop_rate: float, *, training: bool = True) -> DropMask:
    """Keep the highest-variance patches; lower flat index wins ties.

    With ``training=False`` every patch is kept.
    """
    if not (0.0 <= drop_rate < 1.0):
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")
    flat = np.asarray(grid.variances, dtype=np.float64).ravel()
    keep = np.zeros(flat.size, dtype=bool)
    if not training:
        keep[:] = True
    else:
        order = np.argsort(-flat, kind="stable")
        keep[order[: kept_patch_count(flat.size, drop_rate)]] = True
    return DropMask(keep.reshape(grid.rows, grid.cols))


def select_instances(
    objectness: np.ndarray,
    class_scores: np.ndarray,
    k: int,
    *,
    training: bool = True,
) -> InstanceSelection:
    """Top-``k`` tokens by objectness, most objectness first (ties: lower index).

    The class scores of the chosen tokens become the objectness targets;
    unselected tokens get none. With ``training=False`` all tokens are used.
    """
    obj = np.asarray(objectness, dtype=np.float64).ravel()
    cls = np.asarray(class_scores, dtype=np.float64).ravel()
    if obj.shape != cls.shape:
        raise ValueError(f"objectness {obj.shape} and class scores {cls.shape} are not aligned")
    if not training:
        k = obj.size
    if not (0 <= k <= obj.size):
        raise ValueError(f"k={k} exceeds the {obj.size} available tokens")
    idx = np.argsort(-obj, kind="stable")[:k]
    return InstanceSelection(idx, cls[idx])
