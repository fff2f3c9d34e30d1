"""Acceptance criteria, one test per criterion. A PASS/FAIL line per criterion is printed
in the terminal summary (see conftest.py).

The learning criterion trains the default desk model once and caches the checkpoint under
``.acceptance_cache/`` (override with ``SQTK_ACCEPTANCE_CACHE``), keyed by the config digest.
"""

import json
import math
import os
import time
import zlib
from fractions import Fraction

import numpy as np
import pytest

from seqtrack.ablations import REGISTRY
from seqtrack.checkpoint import load_tensors, save_tensors
from seqtrack.cli import main
from seqtrack.codec import BBox, Vocabulary, dequantize_array, quantize_array
from seqtrack.config import RunConfig
from seqtrack.evaluation import evaluate_model, tracker_config
from seqtrack.fusion import FusionConfig, lowrank_param_count
from seqtrack.gradcheck import TOLERANCE, format_table, run_suite
from seqtrack.model import SeqTrack, build_aux_inputs, load_state_dict, state_dict
from seqtrack.synth import AUC_THRESHOLDS, evaluate
from seqtrack.tracker import (
    Tracker,
    TrackerConfig,
    apply_window_penalty,
    greedy_coordinate,
    update_decision,
)
from seqtrack.train import (
    MixStrategy,
    Trainer,
    VideoPool,
    attach_fusion,
    build_model,
    mix_counts,
    sample_batch,
    train_step,
)

crit = pytest.mark.criterion
REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _random_images(rng, B=1, S=64):
    return [rng.random((B, 3, S, S), dtype=np.float32) for _ in range(3)]


# --------------------------------------------------------------------------- 1


@crit(1, "gradient suite: every op and the tiny model, rel err < 1e-3 over 100 seeds, < 2 min")
def test_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(100)
    elapsed = time.perf_counter() - t0
    print(format_table(results))
    assert all(r.max_rel_err < TOLERANCE for r in results), format_table(results)
    assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


# --------------------------------------------------------------------------- 2


@crit(2, "codec bound: 1e6 coordinates per bin count, roundtrip error <= 1/(2 n_bins) exactly")
def test_codec_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    vals = np.concatenate([rng.uniform(0, 1, 10**6 - 3), [0.0, 0.5, 1.0]])
    # every sample is k / 2**53 with integer k, so the bound |(b + 1/2)/n - v| <= 1/(2n) reduces to
    # b * 2**53 <= n * k <= (b + 1) * 2**53, checked in exact integer arithmetic
    scale = 2**53
    k = (vals * scale).astype(np.int64)
    assert np.array_equal(k / scale, vals)
    k = k.astype(object)
    for n in (100, 500, 1000, 2000, 4000, 8000):
        b = quantize_array(vals, n).astype(np.int64)
        assert np.array_equal(dequantize_array(b, n), (b + 0.5) / n)
        nk, lo = k * n, b.astype(object) * scale
        assert ((lo <= nk) & (nk <= lo + scale)).all(), n
    assert time.perf_counter() - t0 < 30


# --------------------------------------------------------------------------- 3


@crit(3, "causality: 100 random prefixes and perturbation positions, earlier outputs bit-identical")
def test_causality():
    t0 = time.perf_counter()
    model = build_model(RunConfig())
    rng = np.random.default_rng(3)
    n = model.vocab.n_bins
    t, d, s = _random_images(rng)
    memory = model.memory(model.encode([t, d], s))
    for _ in range(100):
        ids = np.concatenate([[model.vocab.start], rng.integers(0, n, 4)])[None]
        j = int(rng.integers(1, 5))
        other = ids.copy()
        other[0, j:] = rng.integers(0, n, 5 - j)
        a = model.decoder.forward_teacher_forced(ids, memory).data
        b = model.decoder.forward_teacher_forced(other, memory).data
        assert np.array_equal(a[:, :j], b[:, :j])
    assert time.perf_counter() - t0 < 60


# --------------------------------------------------------------------------- 4


class _UniformModel:
    """Stands in for the decoder: every step returns flat logits."""

    def __init__(self, model):
        self.inner = model

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def step_logits(self, prefix, memory):
        from seqtrack.engine import Value
        return Value(np.zeros((1, self.inner.vocab.head_size)))


@crit(4, "window penalty: central argmax, endpoints never chosen, w/h steps and END untouched")
def test_window_penalty():
    t0 = time.perf_counter()
    n = 4000
    uniform = np.full(n + 1, 1 / (n + 1))
    assert greedy_coordinate(apply_window_penalty(uniform), n) == 1999
    rng = np.random.default_rng(4)
    floor = rng.random(n + 1) * 1e-9
    for k in range(n):
        probs = floor.copy()
        probs[k] = 1.0
        out = apply_window_penalty(probs)
        assert out[n] == probs[n]
        chosen = greedy_coordinate(out, n)
        assert chosen not in (0, n - 1)
        if k not in (0, n - 1):
            assert chosen == k
    # inside the tracker only the centre steps are penalised
    model = build_model(RunConfig())
    tr = Tracker(_UniformModel(model), TrackerConfig(update_mode="off"))
    tr.init(np.zeros((3, 128, 128), np.float32), BBox(64, 64, 16, 16))
    ids, score = tr.predict_tokens(np.zeros((3, 64, 64), np.float32), None)
    assert ids == [1999, 1999, 0, 0]
    assert score == pytest.approx(1 / (n + 1))
    assert time.perf_counter() - t0 < 10


# --------------------------------------------------------------------------- 5


class _ScriptedTracker(Tracker):
    def __init__(self, model, cfg, scores):
        super().__init__(model, cfg)
        self.scores = scores

    def predict_tokens(self, search, aux):
        return [2000, 2000, 1000, 1000], float(self.scores[self.state.frame_index + 1])


@crit(5, "update gate: 100-frame truth table for likelihood, naive and off modes")
def test_update_gate():
    model = build_model(RunConfig())
    rng = np.random.default_rng(5)
    scores = rng.choice([0.0, 0.01, 0.0149999, 0.015, 0.0150001, 0.02, 0.99], size=100)
    scores[[25, 50, 75]] = [0.020, 0.010, 0.015]
    frames = [np.full((3, 128, 128), 0.5, np.float32)] * 100
    for mode in ("likelihood", "naive", "off"):
        tr = _ScriptedTracker(model, TrackerConfig(update_mode=mode), scores)
        recs = tr.track(frames, BBox(64, 64, 16, 16))
        assert len(recs) == 100 and not recs[0].updated
        for r in recs[1:]:
            due = r.frame % 25 == 0
            want = {"likelihood": due and scores[r.frame] > 0.015, "naive": due, "off": False}[mode]
            assert r.updated == want == update_decision(mode, r.frame, scores[r.frame])
    assert update_decision("likelihood", 25, 0.020) and not update_decision("likelihood", 25, 0.010)
    assert not update_decision("likelihood", 26, 0.990)


# --------------------------------------------------------------------------- 6


@crit(6, "overfit: one pair, loss < 0.05 within 500 steps, greedy decode gives the target ids")
def test_overfit_single_pair():
    t0 = time.perf_counter()
    cfg = RunConfig(steps=500, batch_size=1)
    model = build_model(cfg)
    batch = sample_batch(VideoPool(1, 20, 0), np.random.default_rng(0), cfg, model.vocab)
    loss = math.inf
    for step in range(cfg.steps):
        loss = train_step(model, batch, cfg, step).loss
        if loss < 0.05:
            break
    assert loss < 0.05, f"loss {loss:.4f} after {step + 1} steps"
    memory = model.memory(model.encode([batch.templates, batch.dynamic], batch.search))
    prefix = [model.vocab.start]
    for _ in range(4):
        prefix.append(greedy_coordinate(model.step_logits([prefix], memory).data[0], model.vocab.n_bins))
    assert prefix[1:] == batch.target_ids[0, :4].tolist()
    assert time.perf_counter() - t0 < 300


# --------------------------------------------------------------------------- 7

EVAL_SEEDS = 5


def _cache_dir() -> str:
    return os.environ.get("SQTK_ACCEPTANCE_CACHE", os.path.join(REPO, ".acceptance_cache"))


def _trained_default_model() -> tuple[SeqTrack, RunConfig, float]:
    cfg = RunConfig(update_mode="off")
    folder = os.path.join(_cache_dir(), cfg.digest())
    ckpt, meta = os.path.join(folder, "model.sqtk"), os.path.join(folder, "meta.json")
    model = build_model(cfg)
    if os.path.exists(ckpt) and os.path.exists(meta):
        load_state_dict(model, load_tensors(ckpt))
        with open(meta) as f:
            seconds = json.load(f)["train_seconds"]
        return model, cfg, seconds
    t0 = time.perf_counter()
    Trainer(cfg, model).run()
    seconds = time.perf_counter() - t0
    os.makedirs(folder, exist_ok=True)
    save_tensors(ckpt, state_dict(model))
    cfg.save(os.path.join(folder, "run.cfg"))
    with open(meta, "w") as f:
        json.dump({"train_seconds": seconds}, f)
    return model, cfg, seconds


@crit(7, "learning: 20k steps in <= 45 min, held-out AO >= 0.60, window AO >= no-window AO over 5 seeds")
def test_learning():
    model, cfg, seconds = _trained_default_model()
    with_window, without = [], []
    for seed in range(EVAL_SEEDS):
        with_window.append(evaluate_model(model, cfg, seed=seed, tcfg=tracker_config(cfg, window=True)).report.ao)
        without.append(evaluate_model(model, cfg, seed=seed, tcfg=tracker_config(cfg, window=False)).report.ao)
    ao, ao_nw = float(np.mean(with_window)), float(np.mean(without))
    print(f"train {seconds / 60:.1f} min; AO with window {ao:.4f} (per seed {np.round(with_window, 4).tolist()}); "
          f"without {ao_nw:.4f}")
    failures = [msg for ok, msg in (
        (seconds <= 45 * 60, f"training took {seconds / 60:.1f} min"),
        (ao >= 0.60, f"held-out AO {ao:.4f} < 0.60"),
        (ao >= ao_nw, f"window AO {ao:.4f} < no-window AO {ao_nw:.4f}"),
    ) if not ok]
    assert not failures, "; ".join(failures)


# --------------------------------------------------------------------------- 8


@crit(8, "zero-adapter equivalence: v2 logits bit-identical to the base model on 100 inputs")
def test_zero_adapter_equivalence():
    base = build_model(RunConfig())
    v2 = build_model(RunConfig())
    v2.attach_fusion(FusionConfig(enc_prompt=False, dec_prompt=False), seed=11)
    rng = np.random.default_rng(8)
    tasks = ("depth", "thermal", "event", "language")
    for i in range(100):
        t, d, s = _random_images(rng)
        task = tasks[i % 4]
        aux_img = None if task == "language" else rng.random((1, 1, 64, 64), dtype=np.float32)[0]
        aux = build_aux_inputs([task], s, [aux_img], ["the blue circle" if task == "language" else None])
        ids = np.concatenate([[base.vocab.start], rng.integers(0, 4000, 4)])[None]
        assert np.array_equal(v2.forward([t, d], s, ids, aux).data, base.forward([t, d], s, ids).data)


# --------------------------------------------------------------------------- 9


def _checksum(named) -> int:
    crc = 0
    for name, p in named:
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
    return crc


@crit(9, "frozen base: base checksum unchanged after 1k multi-task steps, adapters moved, 3Dd+2d+D params")
def test_frozen_base_contract():
    cfg = RunConfig(task="multi", steps=1000, batch_size=4, mix="equal")
    trainer = Trainer(cfg)
    model = trainer.model
    before = _checksum(model.base_named_parameters())
    adapters_before = _checksum(model.fusion.named_parameters("fusion."))
    trainer.run()
    assert _checksum(model.base_named_parameters()) == before
    assert _checksum(model.fusion.named_parameters("fusion.")) != adapters_before
    assert all(c == 1 for c in mix_counts(MixStrategy("equal"), [None] * 4, 4, 0))
    D, d = cfg.dim, cfg.rank
    assert d == 32
    for ad in model.fusion.adapters:
        assert sum(p.data.size for p in ad.parameters()) == lowrank_param_count(D, d) == 3 * D * d + 2 * d + D
        assert np.any(ad.up.weight.data != 0)


# -------------------------------------------------------------------------- 10


def _oracle_ao_sr(traj, gts):
    ious = []
    for p, g in zip(traj[1:], gts[1:]):
        px0, py0, px1, py1 = (Fraction(v) for v in p.corners())
        gx0, gy0, gx1, gy1 = (Fraction(v) for v in g.corners())
        iw = max(Fraction(0), min(px1, gx1) - max(px0, gx0))
        ih = max(Fraction(0), min(py1, gy1) - max(py0, gy0))
        inter = iw * ih
        ious.append(inter / ((px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter))
    n = len(ious)
    centres = [(Fraction(p.cx) - Fraction(g.cx)) ** 2 + (Fraction(p.cy) - Fraction(g.cy)) ** 2
               for p, g in zip(traj[1:], gts[1:])]
    return dict(
        ious=[float(v) for v in ious],
        ao=float(sum(ious) / n),
        sr50=Fraction(sum(v > Fraction(1, 2) for v in ious), n),
        sr75=Fraction(sum(v > Fraction(3, 4) for v in ious), n),
        auc=Fraction(sum(sum(v > Fraction(k, 20) for v in ious) for k in range(21)), n * 21),
        precision=Fraction(sum(c < 400 for c in centres), n),
    )


@crit(10, "metric oracle on 1000 trajectories; checkpoint save/load bit-exact")
def test_metric_oracle_and_checkpoint(tmp_path):
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        # integer corners keep every intermediate exact, so float and rational paths must agree exactly
        corners = rng.integers(0, 120, size=(2, n, 2))
        sizes = rng.integers(1, 40, size=(2, n, 2))
        gts = [BBox.from_corners(*c, *(c + s)) for c, s in zip(corners[0], sizes[0])]
        traj = [BBox.from_corners(*c, *(c + s)) for c, s in zip(corners[1], sizes[1])]
        for i in range(n):
            if rng.uniform() < 0.5:
                traj[i] = BBox(gts[i].cx + int(rng.integers(-3, 4)), gts[i].cy, gts[i].w + int(rng.integers(0, 3)), gts[i].h)
        got = evaluate(traj, gts)
        want = _oracle_ao_sr(traj, gts)
        assert got.ious == want["ious"]
        assert got.sr50 == float(want["sr50"]) and got.sr75 == float(want["sr75"])
        assert got.precision == float(want["precision"])
        assert got.ao == pytest.approx(want["ao"], rel=0, abs=1e-15)
        assert got.auc == pytest.approx(float(want["auc"]), rel=0, abs=1e-15)
    assert AUC_THRESHOLDS == tuple(k / 20 for k in range(21))
    model = build_model(RunConfig(task="multi"))
    attach_fusion(model, RunConfig(task="multi"))
    tensors = state_dict(model)
    path = str(tmp_path / "m.sqtk")
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    assert all(back[k].tobytes() == tensors[k].tobytes() and back[k].shape == tensors[k].shape for k in tensors)


# -------------------------------------------------------------------------- 11

GROUP_SIZES = {"design": 9, "template-crop": 2, "decoder-depth": 6, "bin-count": 6, "multimodal": 9,
               "adapter-rank": 5}


@crit(11, "ablation registry: every registered variant runs end-to-end through the ablate command")
def test_ablation_registry(tmp_path, capsys):
    assert len(REGISTRY) >= 16
    groups = [a.group for a in REGISTRY.values()]
    assert {g: groups.count(g) for g in GROUP_SIZES} == GROUP_SIZES
    assert REGISTRY["no-window"].delta == {"window": False}
    cfg_path = tmp_path / "tiny.cfg"
    RunConfig(image_size=16, patch_size=8, enc_depth=1, dim=16, heads=2, ffn_dim=32, dec_depth=1, n_bins=50,
              batch_size=4, train_videos=4, video_length=12, canvas=64, steps=2, rank=4, eval_videos=1,
              eval_length=4).save(str(cfg_path))
    for name in REGISTRY:
        assert main(["ablate", name, "--config", str(cfg_path)]) == 0, name
        out = capsys.readouterr().out
        assert "[baseline]" in out and f"[{name}]" in out and "directional agreement" in out
