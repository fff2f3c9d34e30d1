"""Held-out tracking evaluation on synthetic videos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .model import SeqTrack
from .synth import MetricReport, Scene, average_reports, evaluate, random_spec
from .tracker import Tracker, TrackerConfig

# keeps evaluation scenes disjoint from training scenes, which are seeded [seed, index]
EVAL_STREAM = 1_000_003


def eval_scenes(seed: int, n_videos: int, length: int, canvas: int = 128, task: str = "rgb") -> list[Scene]:
    return [Scene(random_spec(np.random.default_rng([EVAL_STREAM, seed, i]), canvas, task), length)
            for i in range(n_videos)]


def tracker_config(cfg: RunConfig, **overrides) -> TrackerConfig:
    kw = dict(search_factor=cfg.search_factor, template_factor=cfg.template_factor, window=cfg.window,
              update_mode=cfg.update_mode, update_interval=cfg.update_interval,
              update_threshold=cfg.update_threshold)
    kw.update(overrides)
    return TrackerConfig(**kw)


@dataclass
class EvalResult:
    report: MetricReport            # sequence-averaged metrics
    per_video: list[MetricReport]


def evaluate_model(model: SeqTrack, cfg: RunConfig, seed: int = 0, task: str = "rgb",
                   tcfg: TrackerConfig | None = None, n_videos: int | None = None,
                   length: int | None = None) -> EvalResult:
    """Track every held-out video from its first-frame box; metrics are averaged per video."""
    tcfg = tcfg or tracker_config(cfg)
    reports = []
    for scene in eval_scenes(seed, n_videos or cfg.eval_videos, length or cfg.eval_length, cfg.canvas, task):
        frames = scene.frames()
        records = Tracker(model, tcfg, task).track(frames)
        reports.append(evaluate([r.box for r in records], [f.gt for f in frames]))
    return EvalResult(average_reports(reports), reports)
