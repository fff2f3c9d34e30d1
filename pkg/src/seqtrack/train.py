"""Teacher-forced training: pair sampling, augmentation, multi-task mixing, optimisation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .codec import TASKS, BBox, Vocabulary, encode_box
from .config import RunConfig
from .engine import Parameter, Tape, adamw_step, backward, clip_grad_norm, cross_entropy, reshape
from .model import AuxInputs, SeqTrack, build_aux_inputs
from .synth import Scene, random_spec
from .tracker import SearchCrop, crop_region, crop_side

log = logging.getLogger(__name__)

MAX_PAIR_RETRIES = 8


@dataclass
class Batch:
    templates: np.ndarray           # [B, 3, T, T]
    dynamic: np.ndarray             # [B, 3, T, T]
    search: np.ndarray              # [B, 3, S, S]
    input_ids: np.ndarray           # [B, 5]
    target_ids: np.ndarray          # [B, 5]
    boxes: list[BBox] = field(default_factory=list)  # crop-normalized search targets
    tasks: list[str] = field(default_factory=list)
    aux_images: list[np.ndarray | None] = field(default_factory=list)
    texts: list[str | None] = field(default_factory=list)

    def __len__(self) -> int:
        return self.search.shape[0]

    def aux(self) -> AuxInputs | None:
        if not self.tasks or any(t not in TASKS for t in self.tasks):
            return None
        return build_aux_inputs(self.tasks, self.search, self.aux_images, self.texts)


@dataclass
class PairSample:
    template: np.ndarray
    dynamic: np.ndarray
    search: np.ndarray
    box: BBox                       # search target, crop-normalized
    aux_image: np.ndarray | None
    text: str | None
    task: str


@dataclass
class LossRecord:
    step: int
    loss: float
    lr_encoder: float
    lr_rest: float
    grad_norm: float

    def format(self) -> str:
        return f"{self.step} {self.loss!r} {self.lr_rest!r}"


# ------------------------------------------------------------------ sampling


class VideoPool:
    """A fixed set of synthetic training videos, rendered lazily frame by frame."""

    def __init__(self, n_videos: int, length: int, seed: int, canvas: int = 128, task: str = "rgb",
                 **spec_overrides):
        if n_videos < 1:
            raise ValueError("video pool is empty")
        self.n_videos, self.length, self.seed = n_videos, length, seed
        self.canvas, self.task = canvas, task
        self.spec_overrides = spec_overrides
        self._scenes: dict[int, Scene] = {}

    def scene(self, i: int) -> Scene:
        sc = self._scenes.get(i)
        if sc is None:
            rng = np.random.default_rng([self.seed, i])
            sc = Scene(random_spec(rng, self.canvas, self.task, **self.spec_overrides), self.length)
            if len(self._scenes) > 4096:
                self._scenes.clear()
            self._scenes[i] = sc
        return sc

    @property
    def n_frames(self) -> int:
        return self.n_videos * self.length


def jitter_box(box: BBox, rng: np.random.Generator, shift: float = 0.8, scale: float = 0.25) -> BBox:
    """Perturb the crop centre and size, imitating an imperfect previous-frame estimate."""
    s = math.sqrt(box.w * box.h)
    f = math.exp(rng.uniform(-scale, scale))
    return BBox(box.cx + rng.uniform(-shift, shift) * s, box.cy + rng.uniform(-shift, shift) * s,
                box.w * f, box.h * f)


def crop_box_of(gt: BBox, crop_box: BBox, factor: float, out_size: int) -> BBox:
    """``gt`` in the normalized coordinates of the search crop centred on ``crop_box``."""
    return SearchCrop((crop_box.cx, crop_box.cy), crop_side(crop_box, factor), out_size).to_crop(gt)


def flip_box(box: BBox) -> BBox:
    return BBox(1.0 - box.cx, box.cy, box.w, box.h)


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return img if factor == 1.0 else np.clip(img * np.float32(factor), 0.0, 1.0)


def make_training_pair(scene: Scene, rng: np.random.Generator, cfg: RunConfig,
                       task: str = "rgb") -> PairSample | None:
    """Sample template, dynamic template and search frames from one video and crop them."""
    n = scene.length
    gap = min(cfg.max_gap, n - 1)
    for _ in range(MAX_PAIR_RETRIES):
        t_idx = int(rng.integers(0, n))
        lo, hi = max(0, t_idx - gap), min(n - 1, t_idx + gap)
        s_idx = int(rng.integers(lo, hi + 1))
        d_idx = int(rng.integers(min(t_idx, s_idx), max(t_idx, s_idx) + 1))
        gt = scene.target_boxes[s_idx]
        crop_box = jitter_box(gt, rng)
        box = crop_box_of(gt, crop_box, cfg.search_factor, cfg.image_size)
        x0, y0, x1, y1 = box.corners()
        if x1 <= 0 or y1 <= 0 or x0 >= 1 or y0 >= 1:
            continue  # target left the crop; resample
        needs_aux = task in ("depth", "thermal", "event")
        search_frame = scene.frame(s_idx) if needs_aux else None
        search_rgb = search_frame.rgb if needs_aux else scene.rgb(s_idx)
        search, _ = crop_region(search_rgb, crop_box, cfg.search_factor, cfg.image_size)
        template, _ = crop_region(scene.rgb(t_idx), scene.target_boxes[t_idx], cfg.template_factor, cfg.tsize)
        dynamic, _ = crop_region(scene.rgb(d_idx), scene.target_boxes[d_idx], cfg.template_factor, cfg.tsize)
        aux_image = None
        if needs_aux:
            aux_image, _ = crop_region(search_frame.aux_image(task), crop_box, cfg.search_factor, cfg.image_size)
        text = scene.spec.language if task == "language" else None
        if rng.uniform() < 0.5:
            template, dynamic, search = template[..., ::-1], dynamic[..., ::-1], search[..., ::-1]
            aux_image = aux_image[..., ::-1] if aux_image is not None else None
            box = flip_box(box)
        factor = float(rng.uniform(0.8, 1.2))
        return PairSample(
            brightness(np.ascontiguousarray(template), factor),
            brightness(np.ascontiguousarray(dynamic), factor),
            brightness(np.ascontiguousarray(search), factor),
            box,
            np.ascontiguousarray(aux_image) if aux_image is not None else None,
            text,
            task,
        )
    return None


def collate(pairs: Sequence[PairSample], vocab: Vocabulary, order: str,
            first_tokens: Sequence[int] | None = None) -> Batch:
    inputs, targets = [], []
    for i, p in enumerate(pairs):
        first = first_tokens[i] if first_tokens is not None else None
        inp, tgt = encode_box(p.box, vocab, order, first)
        inputs.append(inp.ids)
        targets.append(tgt.ids)
    return Batch(
        templates=np.stack([p.template for p in pairs]),
        dynamic=np.stack([p.dynamic for p in pairs]),
        search=np.stack([p.search for p in pairs]),
        input_ids=np.asarray(inputs, np.int64),
        target_ids=np.asarray(targets, np.int64),
        boxes=[p.box for p in pairs],
        tasks=[p.task for p in pairs],
        aux_images=[p.aux_image for p in pairs],
        texts=[p.text for p in pairs],
    )


def sample_batch(pool: VideoPool, rng: np.random.Generator, cfg: RunConfig, vocab: Vocabulary,
                 batch_size: int | None = None) -> Batch:
    pairs: list[PairSample] = []
    B = batch_size or cfg.batch_size
    while len(pairs) < B:
        p = make_training_pair(pool.scene(int(rng.integers(pool.n_videos))), rng, cfg, pool.task)
        if p is not None:
            pairs.append(p)
    return collate(pairs, vocab, cfg.order)


# --------------------------------------------------------------- multi-task


@dataclass
class TaskStream:
    task: str
    pool: VideoPool

    @property
    def n_videos(self) -> int:
        return self.pool.n_videos

    @property
    def n_images(self) -> int:
        return self.pool.n_frames


@dataclass(frozen=True)
class MixStrategy:
    kind: str = "equal"

    def weights(self, streams: Sequence[TaskStream]) -> list[float]:
        if self.kind == "equal":
            raw = [1.0] * len(streams)
        elif self.kind == "proportional_videos":
            raw = [float(s.n_videos) for s in streams]
        elif self.kind == "proportional_images":
            raw = [float(s.n_images) for s in streams]
        else:
            raise ValueError(f"unknown mixing strategy {self.kind!r}")
        total = sum(raw)
        return [r / total for r in raw]


def mix_counts(strategy: MixStrategy, streams: Sequence[TaskStream], batch_size: int, step: int) -> list[int]:
    """Rows per stream. Equal: ``B // k`` each with the remainder rotating by step.
    Proportional: largest-remainder rounding of the weighted share (ties by stream order)."""
    k = len(streams)
    if strategy.kind == "equal":
        if batch_size < k:
            raise ValueError(f"equal mixing needs batch_size >= {k}, got {batch_size}")
        counts = [batch_size // k] * k
        for i in range(batch_size % k):
            counts[(step + i) % k] += 1
        return counts
    shares = [w * batch_size for w in strategy.weights(streams)]
    counts = [int(math.floor(s)) for s in shares]
    order = sorted(range(k), key=lambda i: (-(shares[i] - counts[i]), i))
    for i in order[: batch_size - sum(counts)]:
        counts[i] += 1
    return counts


def sample_multitask(streams: Sequence[TaskStream], strategy: MixStrategy, batch_size: int,
                     rng: np.random.Generator, cfg: RunConfig, vocab: Vocabulary, step: int = 0,
                     dec_prompt: bool = True) -> Batch:
    for s in streams:
        if s.pool.n_videos < 1:
            raise ValueError(f"task stream {s.task!r} is empty")
    pairs: list[PairSample] = []
    for stream, count in zip(streams, mix_counts(strategy, streams, batch_size, step)):
        got = 0
        while got < count:
            p = make_training_pair(stream.pool.scene(int(rng.integers(stream.pool.n_videos))), rng, cfg,
                                   stream.task)
            if p is not None:
                pairs.append(p)
                got += 1
    firsts = [vocab.prompt(p.task) if dec_prompt else vocab.start for p in pairs]
    return collate(pairs, vocab, cfg.order, firsts)


def default_streams(cfg: RunConfig, seed: int) -> list[TaskStream]:
    """Four task streams with deliberately unequal sizes so the mixing strategies differ."""
    n = max(4, cfg.train_videos // 4)
    sizes = {"depth": (n, cfg.video_length), "thermal": (2 * n, cfg.video_length // 2 or 2),
             "event": (n // 2 or 1, cfg.video_length), "language": (n, cfg.video_length // 4 or 2)}
    return [TaskStream(t, VideoPool(sizes[t][0], max(2, sizes[t][1]), seed * 7919 + i + 1, cfg.canvas, t))
            for i, t in enumerate(TASKS)]


# ---------------------------------------------------------------- optimisation


def sequence_loss(logits, target_ids: np.ndarray):
    """Mean cross-entropy over every target position (coordinates and END weighted equally)."""
    B, L, V = logits.shape
    return cross_entropy(reshape(logits, (B * L, V)), np.asarray(target_ids)[:, :L].reshape(-1))


def learning_rates(cfg: RunConfig, step: int) -> tuple[float, float]:
    drop = 0.1 if step >= int(cfg.lr_drop_frac * cfg.steps) else 1.0
    return cfg.lr_encoder * drop, cfg.lr_decoder * drop


def parameter_groups(model: SeqTrack) -> tuple[list[Parameter], list[Parameter]]:
    """(encoder group, everything else); fusion parameters count as 'else'."""
    enc_ids = {id(p) for p in model.encoder_parameters()}
    trainable = [p for p in model.parameters() if p.requires_grad]
    return ([p for p in trainable if id(p) in enc_ids], [p for p in trainable if id(p) not in enc_ids])


def train_step(model: SeqTrack, batch: Batch, cfg: RunConfig, step: int) -> LossRecord:
    lr_enc, lr_rest = learning_rates(cfg, step)
    enc_group, rest_group = parameter_groups(model)
    with Tape() as tape:
        logits = model.forward([batch.templates, batch.dynamic], batch.search, batch.input_ids, batch.aux())
        loss = sequence_loss(logits, batch.target_ids)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {step} (lr encoder {lr_enc}, rest {lr_rest})")
    backward(tape, loss)
    params = enc_group + rest_group
    norm = clip_grad_norm(params, cfg.grad_clip) if cfg.grad_clip > 0 else 0.0
    adamw_step(enc_group, lr_enc, weight_decay=cfg.weight_decay)
    adamw_step(rest_group, lr_rest, weight_decay=cfg.weight_decay)
    for p in model.parameters():
        p.grad = None
    return LossRecord(step, value, lr_enc, lr_rest, norm)


def build_model(cfg: RunConfig) -> SeqTrack:
    return SeqTrack(cfg.model_config(), seed=cfg.seed)


def attach_fusion(model: SeqTrack, cfg: RunConfig) -> None:
    model.attach_fusion(cfg.fusion_config(), cfg.seed + 1)
    if cfg.freeze_base:
        model.freeze_base(True)


class Trainer:
    """Runs ``cfg.steps`` training steps; batches come from a seeded stream."""

    def __init__(self, cfg: RunConfig, model: SeqTrack | None = None,
                 batch_fn: Callable[[int], Batch] | None = None):
        self.cfg = cfg
        self.model = model if model is not None else build_model(cfg)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.multitask = cfg.task == "multi" or cfg.task in TASKS
        if batch_fn is not None:
            self.batch_fn = batch_fn
        elif self.multitask:
            if self.model.fusion is None:
                attach_fusion(self.model, cfg)
            if cfg.task == "multi":
                streams = default_streams(cfg, cfg.seed)
            else:
                streams = [TaskStream(cfg.task, VideoPool(cfg.train_videos, cfg.video_length, cfg.seed,
                                                          cfg.canvas, cfg.task))]
            strategy = MixStrategy(cfg.mix)
            self.batch_fn = lambda step: sample_multitask(streams, strategy, cfg.batch_size, self.rng, cfg,
                                                          self.model.vocab, step, cfg.dec_prompt)
        else:
            pool = VideoPool(cfg.train_videos, cfg.video_length, cfg.seed, cfg.canvas)
            self.batch_fn = lambda step: sample_batch(pool, self.rng, cfg, self.model.vocab)

    def run(self, on_step: Callable[[LossRecord], None] | None = None, start: int = 0) -> list[LossRecord]:
        records = []
        t0 = time.perf_counter()
        for step in range(start, self.cfg.steps):
            rec = train_step(self.model, self.batch_fn(step), self.cfg, step)
            records.append(rec)
            if on_step is not None:
                on_step(rec)
            if step % 500 == 0 or step == self.cfg.steps - 1:
                log.info("step %d loss %.4f (%.1f s)", step, rec.loss, time.perf_counter() - t0)
        return records
