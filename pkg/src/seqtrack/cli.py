"""``seqtrack`` command line: train, track, eval, gradcheck, ablate, export-sequence."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .codec import TASKS, BBox
from .config import RunConfig
from .evaluation import eval_scenes, tracker_config
from .model import SeqTrack, load_state_dict, state_dict
from .results import read_results, write_results
from .synth import evaluate, export_sequence, load_sequence, write_ppm
from .tracker import Tracker

log = logging.getLogger("seqtrack")

MODEL_FILE = "model.sqtk"
CONFIG_FILE = "run.cfg"
LOSS_FILE = "loss.log"


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit status 1."""


# ----------------------------------------------------------------- config


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-window", action="store_true", help="disable the Hann window penalty")
    p.add_argument("--update-mode", choices=("likelihood", "naive", "off"))
    p.add_argument("--task", help="rgb, multi, or a single modality: " + ", ".join(TASKS))
    p.add_argument("--fusion", choices=("lowrank", "add", "attention", "concat"))
    p.add_argument("--bins", type=int, help="coordinate bins per axis")
    p.add_argument("--depth", type=int, help="decoder depth")
    p.add_argument("--order", choices=("xywh", "whxy", "corners"))
    p.add_argument("--template-factor", type=float)
    p.add_argument("--freeze-base", choices=("true", "false"))


_FLAG_KEYS = {"seed": "seed", "steps": "steps", "update_mode": "update_mode", "task": "task",
              "fusion": "fusion", "bins": "n_bins", "depth": "dec_depth", "order": "order",
              "template_factor": "template_factor", "freeze_base": "freeze_base"}


def resolve_config(args, fallback: str | None = None) -> RunConfig:
    """Config file (or ``fallback`` when no --config is given), then command-line overrides."""
    path = args.config or (fallback if fallback and os.path.exists(fallback) else None)
    try:
        cfg = RunConfig.load(path) if path else RunConfig()
        changes = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items()
                   if getattr(args, flag, None) is not None}
        if getattr(args, "no_window", False):
            changes["window"] = False
        return cfg.replace(**changes) if changes else cfg
    except (OSError, ValueError) as e:
        raise CliError(str(e)) from None


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        raise CliError(f"output directory {path!r} is not writable: {e}") from None


# ----------------------------------------------------------------- models


def build_for_config(cfg: RunConfig, with_fusion: bool) -> SeqTrack:
    from .train import attach_fusion, build_model

    model = build_model(cfg)
    if with_fusion:
        attach_fusion(model, cfg)
    return model


def load_model(path: str, cfg: RunConfig) -> SeqTrack:
    try:
        tensors = load_tensors(path)
    except (OSError, CheckpointError) as e:
        raise CliError(f"cannot load checkpoint {path!r}: {e}") from None
    model = build_for_config(cfg, any(k.startswith("fusion.") for k in tensors))
    try:
        load_state_dict(model, tensors)
    except (KeyError, ValueError) as e:
        raise CliError(f"checkpoint {path!r} does not match the configuration: {e}") from None
    return model


# --------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .train import Trainer

    cfg = resolve_config(args)
    _ensure_dir(args.out)
    model = build_for_config(cfg, False)
    if cfg.base_checkpoint:
        try:
            load_state_dict(model, load_tensors(cfg.base_checkpoint))
        except (OSError, CheckpointError, KeyError, ValueError) as e:
            raise CliError(f"cannot load base checkpoint {cfg.base_checkpoint!r}: {e}") from None
    trainer = Trainer(cfg, model)
    cfg.save(os.path.join(args.out, CONFIG_FILE))
    with open(os.path.join(args.out, LOSS_FILE), "w") as logf:
        def on_step(rec):
            logf.write(rec.format() + "\n")
            done = rec.step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
                save_tensors(os.path.join(args.out, f"step{done:06d}.sqtk"), state_dict(trainer.model))
        trainer.run(on_step)
    save_tensors(os.path.join(args.out, MODEL_FILE), state_dict(trainer.model))
    print(f"wrote {os.path.join(args.out, MODEL_FILE)} after {cfg.steps} steps")
    return 0


def draw_box(rgb: np.ndarray, box: BBox, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Copy of ``rgb`` [3, H, W] with a one-pixel box outline."""
    out = rgb.copy()
    _, H, W = out.shape
    x0, y0, x1, y1 = (int(round(v)) for v in box.corners())
    x0, x1 = np.clip([x0, x1 - 1], 0, W - 1)
    y0, y1 = np.clip([y0, y1 - 1], 0, H - 1)
    c = np.asarray(color, out.dtype)[:, None]
    out[:, y0, x0:x1 + 1] = c
    out[:, y1, x0:x1 + 1] = c
    out[:, y0:y1 + 1, x0] = c
    out[:, y0:y1 + 1, x1] = c
    return out


def cmd_track(args) -> int:
    ckpt_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    cfg = resolve_config(args, os.path.join(ckpt_dir, CONFIG_FILE))
    model = load_model(args.checkpoint, cfg)
    if args.sequence:
        try:
            frames = load_sequence(args.sequence)
        except (OSError, ValueError, KeyError) as e:
            raise CliError(f"cannot read sequence {args.sequence!r}: {e}") from None
    else:
        task = cfg.task if cfg.task in TASKS else "rgb"
        frames = eval_scenes(args.video_seed, 1, args.length, cfg.canvas, task)[0].frames()
    task = frames[0].task
    records = Tracker(model, tracker_config(cfg), task).track(frames)
    write_results(args.out, records)
    if args.render:
        _ensure_dir(args.render)
        for rec, fr in zip(records, frames):
            write_ppm(os.path.join(args.render, f"{rec.frame:05d}.ppm"), draw_box(fr.rgb, rec.box))
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _read_gt(path: str):
    if os.path.isdir(path):
        path = os.path.join(path, "groundtruth.txt")
    return [r.box for r in read_results(path)]


def cmd_eval(args) -> int:
    try:
        pred = [r.box for r in read_results(args.results)]
        gts = _read_gt(args.groundtruth)
    except (OSError, ValueError) as e:
        raise CliError(str(e)) from None
    if len(pred) != len(gts):
        raise CliError(f"length mismatch: {len(pred)} result records vs {len(gts)} ground-truth boxes")
    if len(pred) < 2:
        raise CliError("need at least two frames (the first one is excluded)")
    for line in evaluate(pred, gts).lines():
        print(line)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    results = run_suite(args.seeds)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_ablate(args) -> int:
    from .ablations import REGISTRY, registry_listing, run_ablation

    if args.list:
        print(registry_listing())
        return 0
    if args.name not in REGISTRY:
        print(f"unknown ablation {args.name!r}; registered ablations:", file=sys.stderr)
        print(registry_listing(), file=sys.stderr)
        return 2
    cfg = resolve_config(args)
    report = run_ablation(args.name, cfg, progress=lambda msg: log.info(msg))
    print(report.text())
    return 0


def cmd_export(args) -> int:
    task = args.task or "rgb"
    if task not in ("rgb",) + TASKS:
        raise CliError(f"unknown task {task!r}")
    frames = eval_scenes(args.video_seed, 1, args.length, args.canvas, task)[0].frames()
    _ensure_dir(args.out)
    export_sequence(frames, args.out)
    print(f"exported {len(frames)} frames to {args.out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqtrack", description="Sequence-to-sequence visual tracking on synthetic video.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint plus loss log")
    _add_config_flags(t)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="track one video and write per-frame records")
    _add_config_flags(k)
    k.add_argument("--checkpoint", required=True)
    src = k.add_mutually_exclusive_group()
    src.add_argument("--sequence", help="directory written by export-sequence")
    src.add_argument("--video-seed", type=int, default=0, help="held-out synthetic video index")
    k.add_argument("--length", type=int, default=100)
    k.add_argument("--out", required=True, help="results file")
    k.add_argument("--render", help="directory for frames with the predicted box drawn in")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score a results file against ground truth")
    e.add_argument("results")
    e.add_argument("groundtruth", help="groundtruth.txt or an exported sequence directory")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    g.add_argument("--seeds", type=int, default=100)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and compare a baseline against a named variant")
    a.add_argument("name", nargs="?", default="")
    a.add_argument("--list", action="store_true", help="list registered ablations")
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-sequence", help="write a held-out synthetic video to disk")
    x.add_argument("--video-seed", type=int, default=0)
    x.add_argument("--length", type=int, default=100)
    x.add_argument("--canvas", type=int, default=128)
    x.add_argument("--task", default="rgb")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"seqtrack {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
