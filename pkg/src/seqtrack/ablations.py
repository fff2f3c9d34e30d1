"""Named ablations: each maps to a configuration delta applied to a baseline run."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .checkpoint import load_tensors
from .codec import TASKS
from .config import RunConfig
from .evaluation import evaluate_model, tracker_config
from .model import SeqTrack, load_state_dict, state_dict
from .synth import MetricReport, average_reports
from .train import Trainer, attach_fusion, build_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Ablation:
    name: str
    group: str                 # study the row belongs to, e.g. "design"
    delta: dict
    family: str                # "base" (RGB model) or "v2" (multi-modal)
    expected: str              # direction relative to the baseline: "lower", "higher", "similar"
    tracking_only: bool = False  # delta changes inference only; the trained baseline is reused
    per_task: bool = False       # variant trains one adapter set per task instead of a mixed one
    note: str = ""


def _entries() -> list[Ablation]:
    rows = [
        Ablation("bidirectional", "design", {"bidirectional": True}, "base", "lower"),
        Ablation("separate", "design", {"joint": False}, "base", "lower"),
        Ablation("whxy", "design", {"order": "whxy"}, "base", "lower"),
        Ablation("corners", "design", {"order": "corners"}, "base", "lower"),
        Ablation("concat-feat", "design", {"feature_variant": "concat"}, "base", "similar"),
        Ablation("avg-feat", "design", {"feature_variant": "average"}, "base", "lower"),
        Ablation("likelihood-update", "design", {"update_mode": "likelihood"}, "base", "higher", tracking_only=True),
        Ablation("naive-update", "design", {"update_mode": "naive"}, "base", "lower", tracking_only=True),
        Ablation("no-window", "design", {"window": False}, "base", "lower", tracking_only=True),
        Ablation("factor2-small", "template-crop", {"template_factor": 2.0, "template_size": 32}, "base", "lower"),
        Ablation("factor2", "template-crop", {"template_factor": 2.0}, "base", "lower"),
    ]
    rows += [Ablation(f"depth={k}", "decoder-depth", {"dec_depth": k}, "base", "similar") for k in range(1, 7)]
    rows += [Ablation(f"bins={k}", "bin-count", {"n_bins": k}, "base", "similar") for k in (100, 500, 1000, 2000, 4000, 8000)]
    rows += [
        Ablation("single-task", "multimodal", {}, "v2", "similar", per_task=True,
                 note="one adapter set per task, each evaluated on its own task"),
        Ablation("no-enc-prompt", "multimodal", {"enc_prompt": False}, "v2", "lower"),
        Ablation("no-dec-prompt", "multimodal", {"dec_prompt": False}, "v2", "lower"),
        Ablation("fusion=add", "multimodal", {"fusion": "add"}, "v2", "lower"),
        Ablation("fusion=attention", "multimodal", {"fusion": "attention"}, "v2", "lower"),
        Ablation("fusion=concat", "multimodal", {"fusion": "concat"}, "v2", "lower"),
        Ablation("full-ft", "multimodal", {"freeze_base": False}, "v2", "lower"),
        Ablation("mix=videos", "multimodal", {"mix": "proportional_videos"}, "v2", "similar"),
        Ablation("mix=images", "multimodal", {"mix": "proportional_images"}, "v2", "lower"),
    ]
    rows += [Ablation(f"rank={k}", "adapter-rank", {"rank": k}, "v2", "similar") for k in (8, 16, 32, 64, 128)]
    return rows


REGISTRY: dict[str, Ablation] = {a.name: a for a in _entries()}


def registry_listing() -> str:
    return "\n".join(f"{a.name:<18} {a.group:<13} {a.family:<4} {a.delta}" for a in REGISTRY.values())


@dataclass
class ArmResult:
    label: str
    report: MetricReport
    per_task: dict[str, MetricReport] = field(default_factory=dict)


@dataclass
class AblationReport:
    ablation: Ablation
    baseline: ArmResult
    variant: ArmResult

    @property
    def delta_ao(self) -> float:
        return self.variant.report.ao - self.baseline.report.ao

    @property
    def agrees(self) -> bool:
        d = self.delta_ao
        return {"lower": d < 0, "higher": d > 0, "similar": abs(d) <= 0.05}[self.ablation.expected]

    def text(self) -> str:
        a = self.ablation
        delta = a.delta or ("per-task adapters" if a.per_task else {})
        lines = [f"ablation {a.name} ({a.group}): {delta}"]
        for arm in (self.baseline, self.variant):
            lines.append(f"[{arm.label}]")
            lines += ["  " + s for s in arm.report.lines()]
            for task, rep in arm.per_task.items():
                lines.append(f"  {task}: AO {rep.ao:.4f}")
        lines.append(f"delta AO {self.delta_ao:+.4f}; expected {a.expected}; "
                     f"directional agreement: {'yes' if self.agrees else 'no'} (reported, not gated)")
        return "\n".join(lines)


def baseline_config(family: str, cfg: RunConfig) -> RunConfig:
    """Baseline arm: RGB model without template updates, or the multi-task frozen-base v2 model."""
    if family == "base":
        return cfg.replace(update_mode="off", window=True, task="rgb")
    return cfg.replace(update_mode="off", window=True, task="multi")


def _train_base(cfg: RunConfig, cache: dict) -> SeqTrack:
    key = ("base", cfg.replace(update_mode="off", window=True, task="rgb", base_checkpoint="").digest())
    if key not in cache:
        model = build_model(cfg)
        if cfg.base_checkpoint:
            load_state_dict(model, load_tensors(cfg.base_checkpoint))
        else:
            Trainer(cfg.replace(task="rgb"), model).run()
        cache[key] = state_dict(model)
    model = build_model(cfg)
    load_state_dict(model, {k: v.copy() for k, v in cache[key].items()})
    return model


def _train_v2(cfg: RunConfig, cache: dict, task: str = "multi") -> SeqTrack:
    model = _train_base(cfg.replace(task="rgb"), cache)
    attach_fusion(model, cfg)
    Trainer(cfg.replace(task=task), model).run()
    return model


def run_arm(cfg: RunConfig, family: str, label: str, cache: dict, eval_seed: int = 0,
            per_task: bool = False) -> ArmResult:
    if family == "base":
        model = _train_base(cfg, cache)
        return ArmResult(label, evaluate_model(model, cfg, seed=eval_seed).report)
    reports = {}
    if per_task:
        for task in TASKS:
            model = _train_v2(cfg, cache, task)
            reports[task] = evaluate_model(model, cfg, seed=eval_seed, task=task).report
    else:
        model = _train_v2(cfg, cache, "multi")
        for task in TASKS:
            reports[task] = evaluate_model(model, cfg, seed=eval_seed, task=task).report
    return ArmResult(label, average_reports(list(reports.values())), reports)


def run_ablation(name: str, cfg: RunConfig, cache: dict | None = None,
                 progress: Callable[[str], None] | None = None) -> AblationReport:
    """Train/evaluate the baseline and the variant with identical seeds."""
    if name not in REGISTRY:
        raise KeyError(f"unknown ablation {name!r}; known: {', '.join(REGISTRY)}")
    ab = REGISTRY[name]
    cache = {} if cache is None else cache
    base_cfg = baseline_config(ab.family, cfg)
    var_cfg = base_cfg.replace(**ab.delta)
    if progress:
        progress(f"{name}: baseline arm")
    base = run_arm(base_cfg, ab.family, "baseline", cache)
    if progress:
        progress(f"{name}: variant arm")
    var = run_arm(var_cfg, ab.family, name, cache, per_task=ab.per_task)
    return AblationReport(ab, base, var)


__all__ = ["Ablation", "AblationReport", "REGISTRY", "registry_listing", "run_ablation", "tracker_config"]
