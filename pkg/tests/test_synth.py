import math
from fractions import Fraction

import numpy as np
import pytest

from seqtrack.codec import BBox
from seqtrack.synth import (
    AUC_THRESHOLDS,
    Scene,
    SceneSpec,
    evaluate,
    export_sequence,
    generate_sequence,
    iou,
    load_sequence,
    luminance,
    random_spec,
    static_spec,
)


def test_generation_is_deterministic():
    spec = random_spec(np.random.default_rng(5))
    a, b = generate_sequence(spec, 6), generate_sequence(spec, 6)
    for fa, fb in zip(a, b):
        for kind in ("rgb", "depth", "thermal", "event"):
            assert getattr(fa, kind).tobytes() == getattr(fb, kind).tobytes()
        assert fa.gt == fb.gt


def test_single_frame_render_matches_full_pass():
    scene = Scene(random_spec(np.random.default_rng(9), noise=0.03), 5)
    full = scene.frames()
    assert scene.frame(3).event.tobytes() == full[3].event.tobytes()
    assert scene.rgb(4).tobytes() == full[4].rgb.tobytes()


def test_static_scene_has_no_events():
    frames = generate_sequence(static_spec(seed=2), 5)
    assert all(not fr.event.any() for fr in frames)


def test_modality_derivations():
    frames = generate_sequence(random_spec(np.random.default_rng(3), noise=0.0), 3)
    fr, prev = frames[2], frames[1]
    luma = luminance(fr.rgb)
    assert np.array_equal(fr.event[0], np.clip(np.abs(luma - luminance(prev.rgb)), 0, 1))
    assert not frames[0].event.any()
    # thermal is luminance except on the target, where it is boosted
    assert np.all(fr.thermal[0] >= luma - 1e-7)
    cx, cy = int(fr.gt.cx), int(fr.gt.cy)
    assert fr.depth[0, cy, cx] > fr.depth[0, 0, 0]
    assert fr.language.startswith("the ")


def test_gt_boxes_stay_on_canvas():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        spec = random_spec(rng, speed=float(rng.uniform(0, 6)))
        for box in Scene(spec, 12).target_boxes:
            x0, y0, x1, y1 = box.corners()
            assert x0 >= -1e-9 and y0 >= -1e-9 and x1 <= spec.canvas + 1e-9 and y1 <= spec.canvas + 1e-9


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(shape="hexagon")
    with pytest.raises(ValueError):
        SceneSpec(size=100.0)
    with pytest.raises(ValueError):
        Scene(SceneSpec(), 1)


def test_export_load_roundtrip(tmp_path):
    frames = generate_sequence(random_spec(np.random.default_rng(4), task="thermal"), 3)
    export_sequence(frames, str(tmp_path))
    back = load_sequence(str(tmp_path))
    assert len(back) == 3 and back[0].task == "thermal" and back[0].language == frames[0].language
    assert np.abs(back[1].rgb - frames[1].rgb).max() <= 0.5 / 255 + 1e-6
    assert [f.gt for f in back] == [f.gt for f in frames]


# ------------------------------------------------------------------ metrics


def test_iou_examples():
    b = BBox(5, 5, 4, 4)
    assert iou(b, b) == 1.0
    assert iou(b, BBox(50, 50, 4, 4)) == 0.0
    assert iou(BBox.from_corners(0, 0, 2, 2), BBox.from_corners(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def _report_from_ious(ious):
    gts = [BBox(50, 50, 10, 10)] * (len(ious) + 1)
    traj = [gts[0]]
    for v in ious:
        # a box sharing the gt's left edge with width scaled so IoU == v exactly
        w = 10 * v
        traj.append(BBox(45 + w / 2, 50, w, 10))
    return evaluate(traj, gts)


def test_evaluate_examples():
    r = _report_from_ious([1.0, 1.0])
    assert (r.ao, r.sr50, r.sr75, r.precision) == (1.0, 1.0, 1.0, 1.0)
    # success is IoU > t, so the t = 1 threshold is never met
    assert r.auc == pytest.approx(20 / 21)
    r = _report_from_ious([1.0, 0.6, 0.4])
    assert r.ao == pytest.approx(0.6667, abs=1e-4)
    assert r.sr50 == pytest.approx(2 / 3) and r.sr75 == pytest.approx(1 / 3)


def test_evaluate_rejects_bad_lengths():
    with pytest.raises(ValueError):
        evaluate([BBox(1, 1, 1, 1)] * 3, [BBox(1, 1, 1, 1)] * 4)
    with pytest.raises(ValueError):
        evaluate([BBox(1, 1, 1, 1)], [BBox(1, 1, 1, 1)])


def test_evaluate_translation_invariant_and_sr_monotone():
    rng = np.random.default_rng(1)
    gts = [BBox(*rng.uniform(20, 60, 2), *rng.uniform(5, 20, 2)) for _ in range(30)]
    traj = [BBox(g.cx + rng.normal(0, 3), g.cy + rng.normal(0, 3), g.w, g.h) for g in gts]
    shift = lambda bs: [BBox(b.cx + 64, b.cy + 32, b.w, b.h) for b in bs]
    a, b = evaluate(traj, gts), evaluate(shift(traj), shift(gts))
    assert a.ao == pytest.approx(b.ao, abs=1e-12) and a.sr50 == b.sr50
    assert a.sr75 <= a.sr50


def _grid_box(rng):
    x0, y0 = (int(v) for v in rng.integers(0, 100, 2))
    w, h = (int(v) for v in rng.integers(1, 30, 2))
    return BBox.from_corners(x0, y0, x0 + w, y0 + h), (x0, y0, x0 + w, y0 + h)


def _oracle(traj, gts):
    """Brute-force metrics on integer-cornered boxes using exact rational IoUs."""
    ious, dist_ok = [], 0
    for (p, pc), (g, gc) in zip(traj[1:], gts[1:]):
        ix = max(0, min(pc[2], gc[2]) - max(pc[0], gc[0]))
        iy = max(0, min(pc[3], gc[3]) - max(pc[1], gc[1]))
        inter = ix * iy
        union = (pc[2] - pc[0]) * (pc[3] - pc[1]) + (gc[2] - gc[0]) * (gc[3] - gc[1]) - inter
        ious.append(float(Fraction(inter, union)))
        # centres are half-integers, so squared distances are exact
        dx, dy = Fraction(pc[0] + pc[2], 2) - Fraction(gc[0] + gc[2], 2), Fraction(pc[1] + pc[3], 2) - Fraction(gc[1] + gc[3], 2)
        dist_ok += dx * dx + dy * dy < 400
    n = len(ious)
    succ = []
    for t in AUC_THRESHOLDS:
        hits = 0
        for v in ious:
            if v > t:
                hits += 1
        succ.append(hits / n)
    return dict(ao=math.fsum(ious) / n, sr50=sum(v > 0.5 for v in ious) / n,
                sr75=sum(v > 0.75 for v in ious) / n, auc=math.fsum(succ) / len(succ),
                precision=dist_ok / n, ious=ious)


def test_metric_oracle_on_1000_trajectories():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        gts = [_grid_box(rng) for _ in range(n)]
        traj = []
        for g, gc in gts:
            if rng.uniform() < 0.5:
                traj.append(_grid_box(rng))
            else:
                dx, dy = (int(v) for v in rng.integers(-4, 5, 2))
                c = (gc[0] + dx, gc[1] + dy, gc[2] + dx + int(rng.integers(0, 3)), gc[3] + dy)
                traj.append((BBox.from_corners(*c), c))
        got = evaluate([b for b, _ in traj], [b for b, _ in gts])
        want = _oracle(traj, gts)
        assert got.ious == want["ious"]
        for key in ("ao", "sr50", "sr75", "auc", "precision"):
            assert getattr(got, key) == want[key], key
