import math

import numpy as np
import pytest

from seqtrack.engine import (
    Parameter,
    Tape,
    Value,
    adamw_step,
    backward,
    bmm,
    cross_entropy,
    embedding_lookup,
    layer_norm,
    matmul,
    mul,
    add,
    reference_matmul,
    softmax,
    sum_all,
)
from seqtrack.engine import kernels


def test_matmul_identity_and_scalar():
    x = np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32)
    assert np.array_equal(matmul(Value(np.eye(3, dtype=np.float32)), Value(x)).data, x)
    assert matmul(Value([[2.0]]), Value([[3.0]])).data.tolist() == [[6.0]]


@pytest.mark.parametrize("shape", [(4, 5, 3), (1, 8, 8), (7, 3, 2), (2, 6, 5)])
def test_matmul_matches_triple_loop_exactly(shape):
    m, k, n = shape
    rng = np.random.default_rng(sum(shape))
    a = rng.standard_normal((m, k)).astype(np.float32)
    b = rng.standard_normal((k, n)).astype(np.float32)
    ref = np.zeros((m, n), np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0)
            for p in range(k):
                acc = np.float32(acc + np.float32(a[i, p] * b[p, j]))
            ref[i, j] = acc
    assert np.array_equal(matmul(Value(a), Value(b)).data, ref)
    assert np.array_equal(reference_matmul(a, b), ref)


def test_bmm_large_shapes_match_reference():
    rng = np.random.default_rng(3)
    for shp_a, shp_b in [((3, 37, 70), (3, 70, 45)), ((2, 13, 64), (1, 64, 16))]:
        a = rng.standard_normal(shp_a).astype(np.float32)
        b = rng.standard_normal(shp_b).astype(np.float32)
        out = bmm(a, b)
        for i in range(a.shape[0]):
            assert np.array_equal(out[i], reference_matmul(a[i], b[min(i, b.shape[0] - 1)]))


def test_bmm_threads_do_not_change_bits(monkeypatch):
    rng = np.random.default_rng(4)
    a = rng.standard_normal((4, 20, 33)).astype(np.float32)
    b = rng.standard_normal((4, 33, 17)).astype(np.float32)
    single = bmm(a, b)
    monkeypatch.setenv("SQTK_THREADS", "2")
    assert np.array_equal(bmm(a, b), single)


def test_native_kernel_rejects_bad_shapes():
    if not kernels.native_available():
        pytest.skip("native kernel not built")
    from seqtrack.engine._matmul import bmm_into

    a = np.zeros((2, 3, 4), np.float32)
    with pytest.raises(ValueError):
        bmm_into(a, np.zeros((2, 5, 4), np.float32), np.zeros((2, 3, 4), np.float32))


def test_softmax_examples():
    assert np.allclose(softmax(Value([0.0, 0.0])).data, [0.5, 0.5])
    out = softmax(Value([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0)


def test_softmax_mask_zeroes_disallowed():
    mask = np.tril(np.ones((3, 3), bool))
    out = softmax(Value(np.zeros((3, 3))), mask).data
    assert np.allclose(out[0], [1, 0, 0]) and np.allclose(out[2], [1 / 3] * 3)


def test_layer_norm_examples():
    g, b = Value(np.ones(2)), Value(np.zeros(2))
    assert np.array_equal(layer_norm(Value([[5.0, 5.0]]), g, b).data, [[0.0, 0.0]])
    assert np.allclose(layer_norm(Value([[1.0, 3.0]]), g, b).data, [[-1.0, 1.0]], atol=1e-4)


def test_identity_elements():
    x = np.random.default_rng(1).standard_normal((2, 3)).astype(np.float32)
    assert np.array_equal(add(Value(x), Value(np.zeros_like(x))).data, x)
    assert np.array_equal(mul(Value(x), 1.0).data, x)


def test_embedding_lookup_and_duplicate_gradient():
    table = Parameter(np.arange(4, dtype=np.float32).reshape(2, 2))
    assert embedding_lookup(table, np.array([0])).data.tolist() == [[0.0, 1.0]]
    with Tape() as tape:
        loss = sum_all(embedding_lookup(table, np.array([1, 1])))
    backward(tape, loss)
    assert table.grad.tolist() == [[0.0, 0.0], [2.0, 2.0]]


def test_cross_entropy_examples():
    logits = np.zeros((3, 5), np.float32)
    tgt = np.array([0, 3, 4])
    logits[np.arange(3), tgt] = 30.0
    logits64 = logits.astype(np.float64)
    assert cross_entropy(Value(logits64), tgt).item() < 1e-9
    uniform = cross_entropy(Value(np.zeros((2, 4001))), np.array([0, 4000])).item()
    assert uniform == pytest.approx(math.log(4001), abs=1e-6)
    assert uniform == pytest.approx(8.2943, abs=1e-4)


def test_cross_entropy_mean_is_row_permutation_invariant():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((6, 7))
    tgt = rng.integers(0, 7, 6)
    perm = rng.permutation(6)
    assert cross_entropy(Value(logits), tgt).item() == pytest.approx(
        cross_entropy(Value(logits[perm]), tgt[perm]).item(), rel=1e-12)


def test_backward_simple_gradients():
    x = Parameter(np.array([1.0, 2.0]))
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    backward(tape, loss)
    assert x.grad.tolist() == [2.0, 4.0]
    y = Parameter(np.zeros(3))
    with Tape() as tape:
        loss = sum_all(y)
    backward(tape, loss)
    assert y.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_accumulates_and_rejects_non_scalar():
    x = Parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with Tape() as tape:
            loss = sum_all(x)
        backward(tape, loss)
    assert x.grad.tolist() == [2.0, 2.0]
    with Tape() as tape:
        out = mul(x, 2.0)
    with pytest.raises(ValueError):
        backward(tape, out)


def test_values_outside_tape_get_no_node():
    x = Parameter(np.ones(2))
    assert mul(x, 2.0).node is None


def test_adamw_first_step_is_sign_descent():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -4.0, 1e-3])
    adamw_step([p], lr=0.01)
    assert np.allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-6)
    assert p.grad is None and p.step == 1


def test_adamw_zero_grad_and_decay():
    p = Parameter(np.array([1.0, 2.0]))
    p.grad = np.zeros(2)
    adamw_step([p], lr=0.1)
    assert p.data.tolist() == [1.0, 2.0]
    p.grad = np.zeros(2)
    adamw_step([p], lr=0.1, weight_decay=0.5)
    assert np.allclose(p.data, [0.95, 1.9])
