"""Central finite-difference checks of every differentiable op and of a tiny full model.

Checks run in float64 so the finite-difference reference is accurate to well below the
tolerance. Each op case is checked elementwise over all inputs; the model is checked
with one random directional derivative per parameter tensor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .engine import tensor as T
from .engine.optim import Parameter
from .engine.tensor import Tape, Value, backward

TOLERANCE = 1e-3
STEP = 1e-6
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE

    def row(self) -> str:
        return f"{self.name:<16} seeds={self.seeds:<4} max_rel_err={self.max_rel_err:.2e}  " \
               f"{'PASS' if self.passed else 'FAIL'}  ({self.seconds:.2f}s)"


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    diff = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    return diff / max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), FLOOR)


def _leaf(rng, shape, scale=1.0) -> Value:
    return Value(rng.standard_normal(shape) * scale, requires_grad=True)


def check_op(fn: Callable[[list[Value]], Value], inputs: list[Value], rng: np.random.Generator) -> float:
    """Max relative error between tape gradients and central differences over ``inputs``."""
    probe = fn(inputs)
    weights = rng.standard_normal(probe.shape)

    def scalar() -> float:
        return float(np.sum(fn(inputs).data * weights))

    with Tape() as tape:
        loss = T.sum_all(T.mul(fn(inputs), Value(weights)))
    for v in inputs:
        v.grad = None
    backward(tape, loss)
    worst = 0.0
    for v in inputs:
        num = np.zeros_like(v.data)
        flat, gflat = v.data.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            up = scalar()
            flat[i] = orig - STEP
            down = scalar()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * STEP)
        ana = v.grad if v.grad is not None else np.zeros_like(v.data)
        worst = max(worst, rel_err(ana, num))
    return worst


def _ids(rng, shape, n):
    return rng.integers(0, n, size=shape)


# each case draws fresh inputs from the seed and returns (fn, inputs)
def _cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[Value]]]]:
    def matmul(rng):
        return (lambda v: T.matmul(v[0], v[1])), [_leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))]

    def matmul_batched(rng):
        return (lambda v: T.matmul(v[0], v[1])), [_leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 3))]

    def add(rng):
        return (lambda v: T.add(T.add(v[0], v[1]), v[2])), [_leaf(rng, (3, 4)), _leaf(rng, (3, 4)), _leaf(rng, (4,))]

    def mul(rng):
        return (lambda v: T.mul(T.mul(v[0], v[1]), v[2])), [_leaf(rng, (3, 4)), _leaf(rng, (3, 4)), _leaf(rng, (4,))]

    def mul_scalar(rng):
        return (lambda v: T.mul(v[0], 0.37)), [_leaf(rng, (2, 5))]

    def gelu(rng):
        return (lambda v: T.gelu(v[0])), [_leaf(rng, (4, 6), 2.0)]

    def softmax(rng):
        return (lambda v: T.softmax(v[0])), [_leaf(rng, (3, 5))]

    def softmax_masked(rng):
        mask = np.tril(np.ones((4, 4), bool))
        return (lambda v: T.softmax(v[0], mask)), [_leaf(rng, (2, 4, 4))]

    def layer_norm(rng):
        return (lambda v: T.layer_norm(v[0], v[1], v[2])), [_leaf(rng, (3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))]

    def embedding(rng):
        ids = _ids(rng, (2, 3), 5)
        return (lambda v: T.embedding_lookup(v[0], ids)), [_leaf(rng, (5, 4))]

    def cross_entropy(rng):
        tgt = _ids(rng, (6,), 7)
        return (lambda v: T.cross_entropy(v[0], tgt)), [_leaf(rng, (6, 7), 2.0)]

    def reshape(rng):
        return (lambda v: T.reshape(v[0], (6, 2))), [_leaf(rng, (3, 4))]

    def transpose(rng):
        return (lambda v: T.transpose(v[0], (1, 2, 0))), [_leaf(rng, (2, 3, 4))]

    def concat(rng):
        return (lambda v: T.concat([v[0], v[1]], axis=1)), [_leaf(rng, (2, 3, 2)), _leaf(rng, (2, 1, 2))]

    def take(rng):
        return (lambda v: T.take(v[0], 1, 3, axis=1)), [_leaf(rng, (2, 4, 3))]

    def sum_all(rng):
        return (lambda v: T.sum_all(v[0])), [_leaf(rng, (3, 4))]

    def mean(rng):
        return (lambda v: T.mean(v[0], axis=1, keepdims=False)), [_leaf(rng, (3, 4, 2))]

    def max_reduce(rng):
        return (lambda v: T.max_reduce(v[0], axis=0)), [_leaf(rng, (5, 4))]

    return {f.__name__: f for f in (matmul, matmul_batched, add, mul, mul_scalar, gelu, softmax, softmax_masked,
                                    layer_norm, embedding, cross_entropy, reshape, transpose, concat, take,
                                    sum_all, mean, max_reduce)}


OP_CASES = _cases()


def run_op_checks(seeds: int = 100, names: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, build in OP_CASES.items():
        if names is not None and name not in names:
            continue
        t0, worst = time.perf_counter(), 0.0
        for seed in range(seeds):
            rng = np.random.default_rng([seed, 17])
            fn, inputs = build(rng)
            worst = max(worst, check_op(fn, inputs, rng))
        results.append(CheckResult(name, seeds, worst, time.perf_counter() - t0))
    return results


# ------------------------------------------------------------------ model


def tiny_model(seed: int, fusion: bool = False):
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig
    from .fusion import FusionConfig
    from .model import ModelConfig, SeqTrack

    cfg = ModelConfig(
        encoder=EncoderConfig(image_size=16, patch_size=8, depth=2, dim=8, heads=2, ffn_dim=16, out_dim=8),
        decoder=DecoderConfig(depth=1, dim=8, heads=2, ffn_dim=16, n_bins=20),
        fusion=FusionConfig(rank=4, text_rows=16) if fusion else None,
    )
    model = SeqTrack(cfg, seed=seed).astype(np.float64)
    if fusion:
        # break the zero-initialised up-projections so every adapter weight gets a gradient
        rng = np.random.default_rng([seed, 5])
        for ad in model.fusion.adapters:
            ad.up.weight.data[...] = rng.standard_normal(ad.up.weight.shape) * 0.1
        model.freeze_base(False)
    return model


def _model_loss(model, batch) -> Value:
    from .engine import cross_entropy, reshape

    templates, search, ids, targets, aux = batch
    logits = model.forward(templates, search, ids, aux)
    B, L, V = logits.shape
    return cross_entropy(reshape(logits, (B * L, V)), targets.reshape(-1))


def _model_batch(model, rng, fusion: bool):
    from .model import build_aux_inputs

    B, S, n = 2, 16, model.vocab.n_bins
    imgs = [rng.random((B, 3, S, S)) for _ in range(3)]
    coords = rng.integers(0, n, size=(B, 4))
    aux = None
    first = np.full(B, model.vocab.start)
    if fusion:
        tasks = ["depth", "language"]
        aux = build_aux_inputs(tasks, imgs[2], [rng.random((1, S, S)), None], [None, "the red square"])
        aux.images = aux.images.astype(np.float64)
        first = np.asarray([model.vocab.prompt(t) for t in tasks])
    ids = np.concatenate([first[:, None], coords], axis=1)
    targets = np.concatenate([coords, np.full((B, 1), model.vocab.end)], axis=1)
    return [imgs[0], imgs[1]], imgs[2], ids, targets, aux


def check_model(seed: int, fusion: bool = False) -> float:
    model = tiny_model(seed, fusion)
    rng = np.random.default_rng([seed, 23])
    batch = _model_batch(model, rng, fusion)
    params: list[Parameter] = [p for p in model.parameters() if p.requires_grad]
    with Tape() as tape:
        loss = _model_loss(model, batch)
    backward(tape, loss)
    worst = 0.0
    h = STEP
    for p in params:
        d = rng.standard_normal(p.shape)
        ana = float(np.sum((p.grad if p.grad is not None else 0.0) * d))
        orig = p.data.copy()
        p.data = orig + h * d
        up = _model_loss(model, batch).item()
        p.data = orig - h * d
        down = _model_loss(model, batch).item()
        p.data = orig
        num = (up - down) / (2 * h)
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), FLOOR))
    return worst


def run_model_checks(seeds: int = 100) -> list[CheckResult]:
    results = []
    for name, fusion in (("model", False), ("model+fusion", True)):
        t0, worst = time.perf_counter(), 0.0
        for seed in range(seeds):
            worst = max(worst, check_model(seed, fusion))
        results.append(CheckResult(name, seeds, worst, time.perf_counter() - t0))
    return results


def run_suite(seeds: int = 100) -> list[CheckResult]:
    return run_op_checks(seeds) + run_model_checks(seeds)


def format_table(results: list[CheckResult]) -> str:
    lines = [r.row() for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{'ALL PASS' if ok else 'FAILURES'}: {sum(r.passed for r in results)}/{len(results)} "
                 f"checks below {TOLERANCE:g}")
    return "\n".join(lines)


if __name__ == "__main__":  # pragma: no cover
    print(format_table(run_suite()))
