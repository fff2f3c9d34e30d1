"""Online tracking: search-region cropping, greedy token decoding, template updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .codec import TASKS, BBox, dequantize_array
from .model import AuxInputs, SeqTrack, build_aux_inputs
from .results import ResultRecord
from .synth import FrameSample

UPDATE_MODES = ("likelihood", "naive", "off")


@dataclass(frozen=True)
class SearchCrop:
    """Square crop of a frame: ``center`` and ``side`` in frame pixels, resized to ``out_size``."""

    center: tuple[float, float]
    side: float
    out_size: int

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"crop side must be positive, got {self.side}")

    @property
    def scale(self) -> float:
        """Model pixels per frame pixel."""
        return self.out_size / self.side

    @property
    def origin(self) -> tuple[float, float]:
        return (self.center[0] - self.side / 2, self.center[1] - self.side / 2)

    def to_frame(self, box: BBox) -> BBox:
        """Crop-normalized box (coordinates in [0, 1]) to frame pixels."""
        x0, y0 = self.origin
        return BBox(x0 + box.cx * self.side, y0 + box.cy * self.side, box.w * self.side, box.h * self.side)

    def to_crop(self, box: BBox) -> BBox:
        x0, y0 = self.origin
        return BBox((box.cx - x0) / self.side, (box.cy - y0) / self.side, box.w / self.side, box.h / self.side)


def crop_side(box: BBox, factor: float) -> float:
    if not (box.w > 0 and box.h > 0):
        raise ValueError(f"box must have positive size, got {box}")
    return factor * math.sqrt(box.w * box.h)


def crop_region(frame: np.ndarray, box: BBox, factor: float = 4.0,
                out_size: int = 64) -> tuple[np.ndarray, SearchCrop]:
    """Square crop of ``frame`` [C, H, W] around ``box``, bilinearly resized to ``out_size``.

    Samples falling outside the frame take the frame's per-channel mean.
    """
    crop = SearchCrop((box.cx, box.cy), crop_side(box, factor), out_size)
    C, H, W = frame.shape
    x0, y0 = crop.origin
    step = crop.side / out_size
    # sample positions in pixel-index coordinates (pixel k covers [k, k+1), centre k + 0.5)
    pos = (np.arange(out_size, dtype=np.float64) + 0.5) * step - 0.5
    xs, ys = x0 + pos, y0 + pos
    mean = frame.reshape(C, -1).mean(axis=1)

    # separable: interpolate rows, then columns; taps outside the frame read the mean
    rows = _interp_axis(frame, ys, axis=1, fill=mean)
    out = _interp_axis(rows, xs, axis=2, fill=mean)
    return out.astype(np.float32), crop


def _interp_axis(img: np.ndarray, pos: np.ndarray, axis: int, fill: np.ndarray) -> np.ndarray:
    n = img.shape[axis]
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    shape = [1, 1, 1]
    shape[axis] = len(pos)
    out = np.zeros(img.shape[:axis] + (len(pos),) + img.shape[axis + 1:], np.float64)
    for idx, w in ((lo, 1.0 - frac), (lo + 1, frac)):
        valid = ((idx >= 0) & (idx < n)).reshape(shape)
        vals = np.take(img, np.clip(idx, 0, n - 1), axis=axis)
        out += np.where(valid, vals, fill[:, None, None]) * w.reshape(shape)
    return out


# ------------------------------------------------------------ window penalty


@lru_cache(maxsize=16)
def hann_window(n_bins: int) -> np.ndarray:
    k = np.arange(n_bins, dtype=np.float64)
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n_bins - 1)))
    w.flags.writeable = False
    return w


def apply_window_penalty(probs: np.ndarray, enabled: bool = True, n_bins: int | None = None) -> np.ndarray:
    """Multiply the first ``n_bins`` entries by a Hann window; entries after them (END) are untouched.

    ``n_bins`` defaults to the head layout, one coordinate bin per entry except a trailing END.
    """
    out = np.array(probs, copy=True)
    if not enabled:
        return out
    n_bins = out.shape[-1] - 1 if n_bins is None else n_bins
    if not 2 <= n_bins <= out.shape[-1]:
        raise ValueError(f"n_bins {n_bins} does not fit a score vector of {out.shape[-1]}")
    return _penalize(out, n_bins)


def _penalize(out: np.ndarray, n_bins: int) -> np.ndarray:
    out[..., :n_bins] = out[..., :n_bins] * hann_window(n_bins).astype(out.dtype)
    return out


def penalized_steps(order: str) -> tuple[int, ...]:
    """Decoding steps that emit the box centre (x then y) for a coordinate order."""
    return {"xywh": (0, 1), "whxy": (2, 3), "corners": ()}[order]


def greedy_coordinate(probs: np.ndarray, n_bins: int) -> int:
    """Argmax over coordinate bins only (END is never chosen); ties go to the lowest index."""
    return int(np.argmax(probs[:n_bins]))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- tracking


def update_decision(mode: str, frame_index: int, score: float, interval: int = 25,
                    threshold: float = 0.015) -> bool:
    if mode not in UPDATE_MODES:
        raise ValueError(f"unknown update mode {mode!r}; expected one of {UPDATE_MODES}")
    if mode == "off":
        return False
    due = frame_index % interval == 0
    return due if mode == "naive" else due and score > threshold


@dataclass
class TrackerConfig:
    search_factor: float = 4.0
    template_factor: float = 4.0
    window: bool = True
    update_mode: str = "likelihood"
    update_interval: int = 25
    update_threshold: float = 0.015

    def __post_init__(self):
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"unknown update mode {self.update_mode!r}; expected one of {UPDATE_MODES}")


@dataclass
class TrackerState:
    initial_template: np.ndarray | None = None
    dynamic_template: np.ndarray | None = None
    current_box: BBox | None = None
    frame_index: int = 0
    task: str = "rgb"
    language: str = ""
    history: list[ResultRecord] = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return self.initial_template is not None


def _as_sample(frame) -> FrameSample | None:
    return frame if isinstance(frame, FrameSample) else None


def _rgb(frame) -> np.ndarray:
    return frame.rgb if isinstance(frame, FrameSample) else np.asarray(frame, np.float32)


class Tracker:
    """Single-video tracker; the model is only read, so trackers may share one."""

    def __init__(self, model: SeqTrack, cfg: TrackerConfig | None = None, task: str = "rgb"):
        self.model = model
        self.cfg = cfg or TrackerConfig()
        self.task = task
        self.state = TrackerState(task=task)
        enc = model.cfg.encoder
        self.search_size = enc.image_size
        self.template_size = enc.tsize

    def init(self, frame, box: BBox) -> ResultRecord:
        rgb = _rgb(frame)
        tmpl, _ = crop_region(rgb, box, self.cfg.template_factor, self.template_size)
        sample = _as_sample(frame)
        self.state = TrackerState(tmpl, tmpl.copy(), box, 0, self.task,
                                  sample.language if sample is not None else "")
        rec = ResultRecord(0, box.cx, box.cy, box.w, box.h, 1.0, False)
        self.state.history.append(rec)
        return rec

    # -- model interface; scripted tests override this ----------------------

    def _aux(self, frame, search: np.ndarray, crop_box: BBox) -> AuxInputs | None:
        if self.model.fusion is None or self.task not in TASKS:
            return None
        sample = _as_sample(frame)
        aux_img = None
        if sample is not None and sample.aux_image(self.task) is not None:
            aux_img, _ = crop_region(sample.aux_image(self.task), crop_box, self.cfg.search_factor,
                                     self.search_size)
        text = self.state.language if self.task == "language" else None
        return build_aux_inputs([self.task], search[None], [aux_img], [text])

    def predict_tokens(self, search: np.ndarray, aux: AuxInputs | None) -> tuple[list[int], float]:
        """Greedy-decode four coordinate ids for one search crop; return them and the avg score."""
        model = self.model
        n_bins = model.vocab.n_bins
        templates = [self.state.initial_template[None], self.state.dynamic_template[None]]
        memory = model.memory(model.encode(templates, search[None], aux))
        steps = penalized_steps(model.cfg.order)
        chosen, scores = [], []
        if model.cfg.decoder.bidirectional:
            probs_all = softmax_np(model.decoder.forward_bidirectional(memory).data[0])
            for i in range(4):
                ids, score = self._choose(probs_all[i], i in steps, n_bins)
                chosen.append(ids)
                scores.append(score)
        else:
            prefix = [model.first_tokens(1, aux)[0]]
            for i in range(4):
                logits = model.step_logits([prefix], memory).data[0]
                tok, score = self._choose(softmax_np(logits), i in steps, n_bins)
                chosen.append(tok)
                scores.append(score)
                prefix.append(tok)
        return chosen, float(np.mean(scores))

    def _choose(self, probs: np.ndarray, penalize: bool, n_bins: int) -> tuple[int, float]:
        ranked = _penalize(probs.copy(), n_bins) if (penalize and self.cfg.window) else probs
        tok = greedy_coordinate(ranked, n_bins)
        return tok, float(probs[tok])

    # -- per-frame loop -------------------------------------------------------

    def run_frame(self, frame) -> tuple[BBox, float]:
        if not self.state.initialized:
            raise RuntimeError("tracker is not initialized; call init() with the first frame")
        rgb = _rgb(frame)
        search, crop = crop_region(rgb, self.state.current_box, self.cfg.search_factor, self.search_size)
        ids, score = self.predict_tokens(search, self._aux(frame, search, self.state.current_box))
        box = self._clamp(crop.to_frame(_ids_to_box(ids, self.model.vocab.n_bins, self.model.cfg.order)),
                          rgb.shape[2], rgb.shape[1])
        self.state.current_box = box
        self.state.frame_index += 1
        return box, score

    @staticmethod
    def _clamp(box: BBox, W: int, H: int) -> BBox:
        w = min(max(box.w, 1.0), float(W))
        h = min(max(box.h, 1.0), float(H))
        return BBox(min(max(box.cx, 0.0), float(W)), min(max(box.cy, 0.0), float(H)), w, h)

    def maybe_update_template(self, frame, box: BBox, score: float) -> bool:
        cfg = self.cfg
        if not update_decision(cfg.update_mode, self.state.frame_index, score, cfg.update_interval,
                               cfg.update_threshold):
            return False
        self.state.dynamic_template, _ = crop_region(_rgb(frame), box, cfg.template_factor, self.template_size)
        return True

    def step(self, frame) -> ResultRecord:
        box, score = self.run_frame(frame)
        updated = self.maybe_update_template(frame, box, score)
        rec = ResultRecord(self.state.frame_index, box.cx, box.cy, box.w, box.h, score, updated)
        self.state.history.append(rec)
        return rec

    def track(self, frames: Sequence, init_box: BBox | None = None) -> list[ResultRecord]:
        first = frames[0]
        box = init_box if init_box is not None else first.gt
        self.init(first, box)
        for fr in frames[1:]:
            self.step(fr)
        return list(self.state.history)


def _ids_to_box(ids: Sequence[int], n_bins: int, order: str) -> BBox:
    c = dequantize_array(np.asarray(ids), n_bins)
    if order == "xywh":
        return BBox(*map(float, c))
    if order == "whxy":
        return BBox(float(c[2]), float(c[3]), float(c[0]), float(c[1]))
    x0, x1 = sorted((float(c[0]), float(c[2])))
    y0, y1 = sorted((float(c[1]), float(c[3])))
    return BBox.from_corners(x0, y0, x1, y1)


def track_sequence(model: SeqTrack, frames: Sequence[FrameSample], cfg: TrackerConfig | None = None,
                   task: str | None = None) -> list[ResultRecord]:
    task = task or (frames[0].task if isinstance(frames[0], FrameSample) else "rgb")
    return Tracker(model, cfg, task).track(frames)
