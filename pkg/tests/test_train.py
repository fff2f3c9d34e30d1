import math

import numpy as np
import pytest

from seqtrack.codec import BBox, Vocabulary, decode_box
from seqtrack.config import RunConfig
from seqtrack.synth import Scene, iou, random_spec
from seqtrack.train import (
    MixStrategy,
    TaskStream,
    Trainer,
    VideoPool,
    brightness,
    build_model,
    flip_box,
    make_training_pair,
    mix_counts,
    sample_batch,
    sequence_loss,
    train_step,
)
from seqtrack.engine import Value


def tiny_cfg(**kw):
    base = dict(image_size=16, patch_size=8, enc_depth=1, dim=16, heads=2, ffn_dim=32, dec_depth=1,
                n_bins=50, batch_size=2, train_videos=3, video_length=12, canvas=64, steps=3, rank=4)
    base.update(kw)
    return RunConfig(**base)


def _streams(counts):
    return [TaskStream(t, VideoPool(n, 4, i)) for i, (t, n) in enumerate(zip(("depth", "thermal", "event", "language"), counts))]


def test_mix_counts_equal():
    s = _streams((1, 1, 1, 1))
    assert mix_counts(MixStrategy(), s, 8, 0) == [2, 2, 2, 2]
    seen = [mix_counts(MixStrategy(), s, 6, step) for step in range(4)]
    assert all(sorted(c) == [1, 1, 2, 2] for c in seen)
    assert seen[0] == [2, 2, 1, 1] and seen[1] == [1, 2, 2, 1]
    with pytest.raises(ValueError):
        mix_counts(MixStrategy(), s, 3, 0)


def test_mix_counts_proportional():
    s = _streams((40, 40, 10, 10))
    assert mix_counts(MixStrategy("proportional_videos"), s, 10, 0) == [4, 4, 1, 1]
    w = MixStrategy("proportional_images").weights(s)
    assert math.isclose(sum(w), 1.0)
    with pytest.raises(ValueError):
        MixStrategy("bogus").weights(s)


def test_flip_and_brightness():
    b = BBox(0.3, 0.4, 0.2, 0.1)
    assert flip_box(b) == BBox(0.7, 0.4, 0.2, 0.1)
    img = np.random.default_rng(0).random((3, 4, 4), dtype=np.float32)
    assert brightness(img, 1.0) is img


def test_training_pair_targets_match_gt():
    cfg = tiny_cfg(n_bins=4000, image_size=64)
    vocab = Vocabulary(4000)
    rng = np.random.default_rng(0)
    for i in range(20):
        scene = Scene(random_spec(np.random.default_rng(i), 64), 12)
        pair = make_training_pair(scene, rng, cfg)
        assert pair.search.shape == (3, 64, 64) and pair.template.shape == (3, 64, 64)
        from seqtrack.codec import encode_box
        ids = encode_box(pair.box, vocab)[1].ids[:4]
        x0, y0, x1, y1 = pair.box.corners()
        if 0 <= x0 and x1 <= 1 and 0 <= y0 and y1 <= 1:
            assert iou(decode_box(ids, vocab), pair.box) >= 1 - 4 / 4000 / min(pair.box.w, pair.box.h)


def test_batch_offset_pairing():
    cfg = tiny_cfg()
    vocab = Vocabulary(cfg.n_bins)
    batch = sample_batch(VideoPool(2, 8, 0, 64), np.random.default_rng(0), cfg, vocab, 3)
    assert len(batch) == 3
    assert (batch.input_ids[:, 0] == vocab.start).all() and (batch.target_ids[:, 4] == vocab.end).all()
    assert np.array_equal(batch.input_ids[:, 1:], batch.target_ids[:, :4])


def test_sequence_loss_examples():
    tgt = np.array([[0, 1, 2, 3, 50]])
    logits = np.zeros((1, 5, 51))
    logits[0, np.arange(5), tgt[0]] = 30.0
    assert sequence_loss(Value(logits), tgt).item() < 1e-9
    assert sequence_loss(Value(np.zeros((2, 5, 4001))), np.zeros((2, 5), int)).item() == pytest.approx(math.log(4001))


def test_initial_loss_is_calibrated():
    cfg = RunConfig(batch_size=2, train_videos=2, video_length=8, image_size=32)
    model = build_model(cfg)
    batch = sample_batch(VideoPool(2, 8, 0), np.random.default_rng(0), cfg, model.vocab)
    logits = model.forward([batch.templates, batch.dynamic], batch.search, batch.input_ids)
    assert sequence_loss(logits, batch.target_ids).item() == pytest.approx(math.log(4001), rel=0.05)


def test_training_is_deterministic():
    cfg = tiny_cfg()
    a = [r.loss for r in Trainer(cfg).run()]
    b = [r.loss for r in Trainer(cfg).run()]
    assert a == b and all(math.isfinite(x) for x in a)


def test_learning_rate_drop():
    cfg = tiny_cfg(steps=10)
    recs = Trainer(cfg).run()
    assert recs[7].lr_encoder == pytest.approx(cfg.lr_encoder) and recs[8].lr_encoder == pytest.approx(cfg.lr_encoder / 10)
    assert recs[0].lr_rest == pytest.approx(10 * recs[0].lr_encoder)


def test_frozen_base_contract():
    cfg = tiny_cfg(task="multi", batch_size=4, steps=3)
    trainer = Trainer(cfg)
    model = trainer.model
    before = {n: p.data.copy() for n, p in model.base_named_parameters()}
    adapters = {n: p.data.copy() for n, p in model.fusion.named_parameters("fusion.")}
    for step in range(cfg.steps):
        batch = trainer.batch_fn(step)
        assert sorted(set(batch.tasks)) == ["depth", "event", "language", "thermal"]
        train_step(model, batch, cfg, step)
    for n, p in model.base_named_parameters():
        assert p.data.tobytes() == before[n].tobytes(), n
    changed = [n for n, p in model.fusion.named_parameters("fusion.") if not np.array_equal(p.data, adapters[n])]
    assert any(".up." in n for n in changed)
    trainable = {id(p) for p in model.parameters() if p.requires_grad}
    assert trainable == {id(p) for p in model.fusion_parameters()}


def test_non_finite_loss_aborts():
    cfg = tiny_cfg()
    trainer = Trainer(cfg)
    trainer.model.decoder.head3.bias.data[...] = np.nan
    with pytest.raises(FloatingPointError, match="step 0"):
        train_step(trainer.model, trainer.batch_fn(0), cfg, 0)
