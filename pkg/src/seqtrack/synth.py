"""Procedural multi-modal tracking videos and tracking metrics."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .codec import TASKS, BBox

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "magenta": (0.85, 0.1, 0.8),
    "cyan": (0.1, 0.85, 0.9),
    "white": (0.95, 0.95, 0.95),
    "orange": (0.95, 0.5, 0.05),
}
SEQUENCE_TASKS = ("rgb",) + TASKS

# distance-to-camera proxies; depth = 1 - distance
_DIST_BACKGROUND = 0.9
_DIST_DISTRACTOR = 0.6
_DIST_TARGET = 0.3
_DIST_OCCLUDER = 0.15
_THERMAL_BOOST = 0.4


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 128
    shape: str = "square"
    color: str = "red"
    size: float = 14.0          # initial target side in pixels (geometric mean of w, h)
    aspect: float = 1.0         # w / h
    speed: float = 1.5          # initial speed, px/frame
    accel: float = 0.3          # std of the per-frame random acceleration
    scale_drift: float = 0.01   # std of the per-frame log-size change
    n_distractors: int = 2
    noise: float = 0.02
    occluder_prob: float = 0.0
    task: str = "rgb"
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.task not in SEQUENCE_TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {SEQUENCE_TASKS}")
        if not 4 <= self.size <= self.canvas / 3:
            raise ValueError(f"target size {self.size} must lie in [4, canvas/3]")

    @property
    def language(self) -> str:
        return f"the {self.color} {self.shape}"


def random_spec(rng: np.random.Generator, canvas: int = 128, task: str = "rgb", **overrides) -> SceneSpec:
    """Draw a scene with randomized target appearance and motion."""
    kw = dict(
        canvas=canvas,
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=list(COLORS)[rng.integers(len(COLORS))],
        size=float(rng.uniform(0.08, 0.16) * canvas),
        aspect=float(np.exp(rng.uniform(-0.3, 0.3))),
        speed=float(rng.uniform(0.0, 0.025) * canvas),
        accel=float(rng.uniform(0.0, 0.004) * canvas),
        scale_drift=float(rng.uniform(0.0, 0.02)),
        n_distractors=int(rng.integers(0, 4)),
        noise=float(rng.uniform(0.0, 0.04)),
        occluder_prob=0.0,
        task=task,
        seed=int(rng.integers(2**31)),
    )
    kw.update(overrides)
    return SceneSpec(**kw)


@dataclass
class FrameSample:
    rgb: np.ndarray       # [3, H, W]
    depth: np.ndarray     # [1, H, W]
    thermal: np.ndarray   # [1, H, W]
    event: np.ndarray     # [1, H, W]
    language: str
    gt: BBox              # frame pixels
    task: str

    def aux_image(self, task: str | None = None) -> np.ndarray | None:
        """The image-format auxiliary modality for ``task`` (None for language/RGB)."""
        task = task or self.task
        return {"depth": self.depth, "thermal": self.thermal, "event": self.event}.get(task)


@dataclass
class MetricReport:
    ao: float
    sr50: float
    sr75: float
    auc: float
    precision: float
    ious: list[float] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [f"AO {self.ao:.4f}", f"SR_0.5 {self.sr50:.4f}", f"SR_0.75 {self.sr75:.4f}",
                f"AUC {self.auc:.4f}", f"Precision@20px {self.precision:.4f}"]

    def __str__(self) -> str:
        return "\n".join(self.lines())


# ----------------------------------------------------------------- rendering


def luminance(rgb: np.ndarray) -> np.ndarray:
    return (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]).astype(np.float32)


def shape_mask(shape: str, box: BBox, H: int, W: int) -> np.ndarray:
    """Boolean mask of a filled shape inscribed in ``box``, sampled at pixel centres."""
    ys = np.arange(H, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(W, dtype=np.float64)[None, :] + 0.5
    x0, y0, x1, y1 = box.corners()
    inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if shape == "square":
        return inside
    if shape == "circle":
        u = (xs - box.cx) / (box.w / 2)
        v = (ys - box.cy) / (box.h / 2)
        return inside & (u * u + v * v <= 1.0)
    if shape == "triangle":
        # apex at the top centre, base along the bottom edge
        frac = (ys - y0) / box.h
        return inside & (np.abs(xs - box.cx) <= frac * box.w / 2)
    raise ValueError(f"unknown shape {shape!r}")


@dataclass
class _Mover:
    cx: float
    cy: float
    vx: float
    vy: float
    size: float
    aspect: float

    @property
    def w(self) -> float:
        return self.size * math.sqrt(self.aspect)

    @property
    def h(self) -> float:
        return self.size / math.sqrt(self.aspect)

    def box(self) -> BBox:
        return BBox(self.cx, self.cy, self.w, self.h)

    def step(self, rng: np.random.Generator, accel: float, drift: float, canvas: int,
             size_range: tuple[float, float]) -> None:
        self.vx += accel * rng.standard_normal()
        self.vy += accel * rng.standard_normal()
        self.size = float(np.clip(self.size * math.exp(drift * rng.standard_normal()), *size_range))
        self.cx += self.vx
        self.cy += self.vy
        # bounce so the whole box stays on the canvas
        for attr, vel, half in (("cx", "vx", self.w / 2), ("cy", "vy", self.h / 2)):
            lo, hi = half, canvas - half
            pos = getattr(self, attr)
            if pos < lo:
                setattr(self, attr, 2 * lo - pos)
                setattr(self, vel, abs(getattr(self, vel)))
            elif pos > hi:
                setattr(self, attr, 2 * hi - pos)
                setattr(self, vel, -abs(getattr(self, vel)))
            setattr(self, attr, float(np.clip(getattr(self, attr), lo, hi)))


def _spawn(rng: np.random.Generator, canvas: int, size: float, aspect: float, speed: float) -> _Mover:
    m = _Mover(0.0, 0.0, 0.0, 0.0, size, aspect)
    m.cx = float(rng.uniform(m.w / 2, canvas - m.w / 2))
    m.cy = float(rng.uniform(m.h / 2, canvas - m.h / 2))
    ang = rng.uniform(0, 2 * math.pi)
    m.vx, m.vy = speed * math.cos(ang), speed * math.sin(ang)
    return m


class Scene:
    """Simulated motion for one sequence; frames are rendered on demand.

    Motion is simulated up front (cheap); pixel noise for frame ``t`` comes from its own
    seeded stream, so any frame renders identically whether alone or in a full pass.
    """

    def __init__(self, spec: SceneSpec, length: int):
        if length < 2:
            raise ValueError("a sequence needs at least 2 frames")
        self.spec = spec
        self.length = length
        rng = np.random.default_rng(spec.seed)
        S = spec.canvas
        size_range = (max(4.0, spec.size * 0.6), min(S / 3, spec.size * 1.6))

        # smooth background: a colour gradient plus low-frequency blobs
        ys, xs = np.mgrid[0:S, 0:S].astype(np.float32) / S
        base = rng.uniform(0.2, 0.6, size=3)
        grad = rng.uniform(-0.25, 0.25, size=(3, 2))
        background = np.stack([base[c] + grad[c, 0] * xs + grad[c, 1] * ys for c in range(3)])
        for _ in range(3):
            bx, by, br = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.1, 0.3)
            blob = np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * br * br))
            background += rng.uniform(-0.15, 0.15, size=3)[:, None, None] * blob
        self.background = np.clip(background, 0, 1).astype(np.float32)
        self.bg_dist = np.float32(_DIST_BACKGROUND) - np.float32(0.1) * ys  # nearer towards the bottom
        self._col_centres = np.arange(S, dtype=np.float64) + 0.5

        target = _spawn(rng, S, spec.size, spec.aspect, spec.speed)
        other_colors = [c for c in COLORS if c != spec.color]
        movers, self.distractor_looks = [], []
        for _ in range(spec.n_distractors):
            movers.append(_spawn(rng, S, float(rng.uniform(*size_range)), float(np.exp(rng.uniform(-0.3, 0.3))),
                                 float(rng.uniform(0, max(spec.speed, 0.5)))))
            self.distractor_looks.append((SHAPES[rng.integers(len(SHAPES))],
                                          other_colors[rng.integers(len(other_colors))]))

        self.occluder = None  # (first frame, colour, width, per-frame x centres)
        occ = None
        if spec.occluder_prob > 0 and rng.uniform() < spec.occluder_prob:
            t0 = int(rng.integers(1, max(2, length - 1)))
            occ = (t0, np.asarray(COLORS[other_colors[rng.integers(len(other_colors))]], np.float32),
                   float(spec.size * 1.2), float(rng.choice([-1.0, 1.0]) * S / 20))

        self.target_boxes: list[BBox] = []
        self.distractor_boxes: list[list[BBox]] = []
        occ_x = [math.nan] * length
        for t in range(length):
            if t > 0:
                target.step(rng, spec.accel, spec.scale_drift, S, size_range)
                for d in movers:
                    d.step(rng, spec.accel, 0.0, S, size_range)
            self.target_boxes.append(target.box())
            self.distractor_boxes.append([d.box() for d in movers])
            if occ is not None and t >= occ[0]:
                # a full-height bar that reaches the target about 8 frames after appearing
                start = self.target_boxes[occ[0]].cx - 8 * occ[3]
                occ_x[t] = start + occ[3] * (t - occ[0])
        if occ is not None:
            self.occluder = (occ[0], occ[1], occ[2], occ_x)

    def _render_rgb(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        spec, S = self.spec, self.spec.canvas
        rgb = self.background.copy()
        dist = self.bg_dist.copy()
        for box, (dshape, dcolor) in zip(self.distractor_boxes[t], self.distractor_looks):
            m = shape_mask(dshape, box, S, S)
            rgb[:, m] = np.asarray(COLORS[dcolor], np.float32)[:, None]
            dist[m] = _DIST_DISTRACTOR
        tmask = shape_mask(spec.shape, self.target_boxes[t], S, S)
        rgb[:, tmask] = np.asarray(COLORS[spec.color], np.float32)[:, None]
        dist[tmask] = _DIST_TARGET
        if self.occluder is not None and t >= self.occluder[0]:
            _, color, width, xs = self.occluder
            cols = np.abs(self._col_centres - xs[t]) < width / 2
            omask = np.broadcast_to(cols[None, :], (S, S))
            rgb[:, omask] = color[:, None]
            dist[omask] = _DIST_OCCLUDER
            tmask = tmask & ~omask
        if spec.noise > 0:
            noise_rng = np.random.default_rng([spec.seed, t + 1])
            rgb += noise_rng.standard_normal(size=rgb.shape, dtype=np.float32) * np.float32(spec.noise)
        return np.clip(rgb, 0.0, 1.0).astype(np.float32), dist, tmask

    def rgb(self, t: int) -> np.ndarray:
        """Just the colour image of frame ``t`` (skips the auxiliary modalities)."""
        if not 0 <= t < self.length:
            raise IndexError(f"frame {t} outside [0, {self.length})")
        return self._render_rgb(t)[0]

    def frame(self, t: int, prev_luma: np.ndarray | None = None) -> FrameSample:
        if not 0 <= t < self.length:
            raise IndexError(f"frame {t} outside [0, {self.length})")
        rgb, dist, tmask = self._render_rgb(t)
        luma = luminance(rgb)
        thermal = luma.copy()
        thermal[tmask] += np.float32(_THERMAL_BOOST)
        thermal = np.clip(thermal, 0.0, 1.0)
        if t == 0:
            event = np.zeros_like(luma)
        else:
            if prev_luma is None:
                prev_luma = luminance(self._render_rgb(t - 1)[0])
            event = np.clip(np.abs(luma - prev_luma), 0.0, 1.0)
        return FrameSample(
            rgb=rgb,
            depth=(1.0 - dist)[None].astype(np.float32),
            thermal=thermal[None].astype(np.float32),
            event=event[None].astype(np.float32),
            language=self.spec.language,
            gt=self.target_boxes[t],
            task=self.spec.task,
        )

    def frames(self) -> list[FrameSample]:
        out, prev = [], None
        for t in range(self.length):
            fr = self.frame(t, prev)
            prev = luminance(fr.rgb)
            out.append(fr)
        return out


def generate_sequence(spec: SceneSpec, length: int) -> list[FrameSample]:
    """Render ``length`` frames; fully determined by ``spec`` (including its seed)."""
    return Scene(spec, length).frames()


def static_spec(**overrides) -> SceneSpec:
    """A motionless, noiseless scene (useful for sanity checks)."""
    return replace(SceneSpec(speed=0.0, accel=0.0, scale_drift=0.0, noise=0.0, n_distractors=0), **overrides)


# ------------------------------------------------------------------- metrics


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


AUC_THRESHOLDS = tuple(k / 20 for k in range(21))
PRECISION_PIXELS = 20.0


def evaluate(trajectory: Sequence[BBox], gts: Sequence[BBox]) -> MetricReport:
    """Tracking metrics over frames 1..n-1 (frame 0 is the initialization)."""
    if len(trajectory) != len(gts):
        raise ValueError(f"trajectory has {len(trajectory)} boxes but there are {len(gts)} ground truths")
    if len(gts) < 2:
        raise ValueError("need at least 2 frames (frame 0 is excluded)")
    ious = [iou(p, g) for p, g in zip(trajectory[1:], gts[1:])]
    n = len(ious)
    ious_arr = np.asarray(ious)
    dists = [math.hypot(p.cx - g.cx, p.cy - g.cy) for p, g in zip(trajectory[1:], gts[1:])]
    success = [int(np.count_nonzero(ious_arr > t)) / n for t in AUC_THRESHOLDS]
    return MetricReport(
        ao=math.fsum(ious) / n,
        sr50=int(np.count_nonzero(ious_arr > 0.5)) / n,
        sr75=int(np.count_nonzero(ious_arr > 0.75)) / n,
        auc=math.fsum(success) / len(AUC_THRESHOLDS),
        precision=sum(d < PRECISION_PIXELS for d in dists) / n,
        ious=ious,
    )


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    k = len(reports)
    if not k:
        raise ValueError("no reports to average")
    return MetricReport(
        ao=math.fsum(r.ao for r in reports) / k,
        sr50=math.fsum(r.sr50 for r in reports) / k,
        sr75=math.fsum(r.sr75 for r in reports) / k,
        auc=math.fsum(r.auc for r in reports) / k,
        precision=math.fsum(r.precision for r in reports) / k,
        ious=[v for r in reports for v in r.ious],
    )


# -------------------------------------------------------------------- export


def _to_bytes(img: np.ndarray) -> bytes:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).tobytes()


def write_ppm(path: str, rgb: np.ndarray) -> None:
    """Binary PPM (P6) from a [3, H, W] image in [0, 1]."""
    _, H, W = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode())
        f.write(_to_bytes(np.transpose(rgb, (1, 2, 0))))


def write_pgm(path: str, img: np.ndarray) -> None:
    """Binary PGM (P5) from a [1, H, W] or [H, W] image in [0, 1]."""
    img = img.reshape(img.shape[-2:])
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode())
        f.write(_to_bytes(img))


def read_pnm(path: str) -> np.ndarray:
    """Read a binary PPM/PGM written by :func:`write_ppm`/:func:`write_pgm` as [C, H, W] floats."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    pos += 1
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported PNM header {tokens}")
    C = 3 if magic == "P6" else 1
    px = np.frombuffer(data, np.uint8, count=W * H * C, offset=pos).reshape(H, W, C)
    return (np.transpose(px, (2, 0, 1)).astype(np.float32) / 255.0)


def export_sequence(frames: Sequence[FrameSample], out_dir: str) -> None:
    """Write frames as PPM/PGM files plus ``groundtruth.txt`` and ``meta.txt``."""
    from .results import ResultRecord, write_results

    os.makedirs(out_dir, exist_ok=True)
    for t, fr in enumerate(frames):
        write_ppm(os.path.join(out_dir, f"{t:05d}.ppm"), fr.rgb)
        for kind in ("depth", "thermal", "event"):
            write_pgm(os.path.join(out_dir, f"{t:05d}.{kind}.pgm"), getattr(fr, kind))
    write_results(os.path.join(out_dir, "groundtruth.txt"),
                  [ResultRecord(t, *fr.gt.as_tuple(), 1.0, False) for t, fr in enumerate(frames)])
    with open(os.path.join(out_dir, "meta.txt"), "w") as f:
        f.write(f"task = {frames[0].task}\nlanguage = {frames[0].language}\nlength = {len(frames)}\n")


def load_sequence(seq_dir: str) -> list[FrameSample]:
    from .results import read_results

    meta = {}
    with open(os.path.join(seq_dir, "meta.txt")) as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    gts = read_results(os.path.join(seq_dir, "groundtruth.txt"))
    frames = []
    for t in range(int(meta["length"])):
        stem = os.path.join(seq_dir, f"{t:05d}")
        frames.append(FrameSample(
            rgb=read_pnm(stem + ".ppm"),
            depth=read_pnm(stem + ".depth.pgm"),
            thermal=read_pnm(stem + ".thermal.pgm"),
            event=read_pnm(stem + ".event.pgm"),
            language=meta.get("language", ""),
            gt=gts[t].box,
            task=meta.get("task", "rgb"),
        ))
    return frames
