"""Bounding boxes as discrete coordinate tokens over a shared vocabulary."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

log = logging.getLogger(__name__)

TASKS = ("depth", "thermal", "event", "language")
ORDERS = ("xywh", "whxy", "corners")

_clamped = 0


def clamp_count() -> int:
    """Number of coordinates clamped into [0, 1] by :func:`quantize_coord` so far."""
    return _clamped


@dataclass(frozen=True)
class BBox:
    """Center/size box. Crop-normalized in the codec, pixels in frame space."""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def is_normalized(self) -> bool:
        return 0 <= self.cx <= 1 and 0 <= self.cy <= 1 and 0 < self.w <= 1 and 0 < self.h <= 1


@dataclass(frozen=True)
class Vocabulary:
    """Ids ``0..n_bins-1`` are coordinates, then END, START and four task prompts."""

    n_bins: int = 4000

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")

    @property
    def end(self) -> int:
        return self.n_bins

    @property
    def start(self) -> int:
        return self.n_bins + 1

    @property
    def size(self) -> int:
        return self.n_bins + 6

    @property
    def head_size(self) -> int:
        """Logit width: coordinate words plus END."""
        return self.n_bins + 1

    def prompt(self, task: str) -> int:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        return self.n_bins + 2 + TASKS.index(task)

    def is_prompt(self, token: int) -> bool:
        return self.n_bins + 2 <= token < self.n_bins + 6


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    role: str  # "decoder_input" | "decoder_target"


def quantize_coord(v: float, n_bins: int) -> int:
    global _clamped
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    if not 0.0 <= v <= 1.0:
        _clamped += 1
        log.debug("coordinate %r clamped into [0, 1]", v)
        v = min(max(v, 0.0), 1.0)
    return min(max(int(math.floor(v * n_bins)), 0), n_bins - 1)


def dequantize_coord(bin_id: int, n_bins: int) -> float:
    if not 0 <= bin_id < n_bins:
        raise ValueError(f"bin {bin_id} outside [0, {n_bins})")
    return (bin_id + 0.5) / n_bins


def box_to_coords(b: BBox, order: str = "xywh") -> tuple[float, float, float, float]:
    if order == "xywh":
        return (b.cx, b.cy, b.w, b.h)
    if order == "whxy":
        return (b.w, b.h, b.cx, b.cy)
    if order == "corners":
        return b.corners()
    raise ValueError(f"unknown coordinate order {order!r}")


def coords_to_box(c: Sequence[float], order: str = "xywh") -> BBox:
    if order == "xywh":
        return BBox(*c)
    if order == "whxy":
        return BBox(c[2], c[3], c[0], c[1])
    if order == "corners":
        if c[2] < c[0] or c[3] < c[1]:
            raise ValueError(f"degenerate corner box {tuple(c)}")
        return BBox.from_corners(*c)
    raise ValueError(f"unknown coordinate order {order!r}")


def encode_box(b: BBox, vocab: Vocabulary, order: str = "xywh",
               first: int | None = None) -> tuple[TokenSequence, TokenSequence]:
    """Return ``([first, c0..c3], [c0..c3, END])``; ``first`` defaults to START."""
    ids = tuple(quantize_coord(v, vocab.n_bins) for v in box_to_coords(b, order))
    first = vocab.start if first is None else first
    return (TokenSequence((first,) + ids, "decoder_input"),
            TokenSequence(ids + (vocab.end,), "decoder_target"))


def decode_box(ids: Sequence[int], vocab: Vocabulary, order: str = "xywh") -> BBox:
    if len(ids) != 4:
        raise ValueError(f"expected 4 coordinate ids, got {len(ids)}")
    for t in ids:
        if not 0 <= t < vocab.n_bins:
            raise ValueError(f"malformed box sequence: id {t} is not a coordinate word")
    return coords_to_box([dequantize_coord(int(t), vocab.n_bins) for t in ids], order)


def quantize_array(v, n_bins: int):
    """Vectorized :func:`quantize_coord` (no clamp counting)."""
    import numpy as np

    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.clip(np.floor(v * n_bins), 0, n_bins - 1).astype(np.int64)


def dequantize_array(bins, n_bins: int):
    import numpy as np

    bins = np.asarray(bins)
    if bins.size and (bins.min() < 0 or bins.max() >= n_bins):
        raise ValueError(f"bins outside [0, {n_bins})")
    return (bins.astype(np.float64) + 0.5) / n_bins
