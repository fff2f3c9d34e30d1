import numpy as np

from seqtrack import gradcheck
from seqtrack.engine import tensor as T


def test_every_op_passes_a_few_seeds():
    results = gradcheck.run_op_checks(seeds=3)
    assert {r.name for r in results} == set(gradcheck.OP_CASES)
    assert all(r.passed for r in results), gradcheck.format_table(results)


def test_model_checks_pass():
    for fusion in (False, True):
        assert gradcheck.check_model(0, fusion) < gradcheck.TOLERANCE


def test_corrupted_backward_is_caught(monkeypatch):
    honest = T.gelu

    def broken_gelu(x):
        out = honest(x)
        return T._record("gelu", out.data, (x,), lambda g: (g * 1.01,))

    monkeypatch.setattr(T, "gelu", broken_gelu)
    results = gradcheck.run_op_checks(seeds=2, names=["gelu"])
    assert not results[0].passed
    assert "FAIL" in gradcheck.format_table(results)


def test_suite_is_deterministic():
    a = gradcheck.run_op_checks(seeds=2, names=["softmax", "layer_norm"])
    b = gradcheck.run_op_checks(seeds=2, names=["softmax", "layer_norm"])
    assert [r.max_rel_err for r in a] == [r.max_rel_err for r in b]
    assert np.isfinite([r.max_rel_err for r in a]).all()
