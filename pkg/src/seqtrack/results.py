"""Per-frame tracking records as plain text, one record per line.

Line format: ``frame cx cy w h score updated`` where ``frame`` is an integer,
the box is in frame pixels, and ``updated`` is 0 or 1. Floats are written with
``repr`` so a write/read cycle is lossless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .codec import BBox


@dataclass(frozen=True)
class ResultRecord:
    frame: int
    cx: float
    cy: float
    w: float
    h: float
    score: float
    updated: bool

    @property
    def box(self) -> BBox:
        return BBox(self.cx, self.cy, self.w, self.h)

    def format(self) -> str:
        return " ".join([str(self.frame)] + [repr(float(v)) for v in (self.cx, self.cy, self.w, self.h, self.score)]
                        + ["1" if self.updated else "0"])


def parse_line(line: str) -> ResultRecord:
    fields = line.split()
    if len(fields) != 7:
        raise ValueError(f"expected 7 fields, got {len(fields)}: {line!r}")
    try:
        frame = int(fields[0])
        vals = [float(v) for v in fields[1:6]]
    except ValueError as e:
        raise ValueError(f"malformed record {line!r}: {e}") from None
    if frame < 0:
        raise ValueError(f"negative frame index in {line!r}")
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite value in {line!r}")
    if vals[2] <= 0 or vals[3] <= 0:
        raise ValueError(f"box must have positive size in {line!r}")
    if fields[6] not in ("0", "1"):
        raise ValueError(f"updated flag must be 0 or 1 in {line!r}")
    return ResultRecord(frame, *vals, fields[6] == "1")


def read_results(path: str) -> list[ResultRecord]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = parse_line(line)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            if rec.frame != len(records):
                raise ValueError(f"{path}:{lineno}: expected frame {len(records)}, got {rec.frame}")
            records.append(rec)
    return records


def write_results(path: str, records: Iterable[ResultRecord]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.format() + "\n")
