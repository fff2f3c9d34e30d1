"""Matrix-multiply kernel with a fixed per-element accumulation order.

Every output element is computed as ``c = ((0 + a0*b0) + a1*b1) + ...`` with the
reduction index ascending and each product and sum rounded separately (no FMA
contraction). This makes results bit-identical to a naive triple loop and
independent of thread count.

float32 products use the compiled extension when it is available; the numba
kernels cover float64, the threaded path, and builds without the extension.
"""

from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit, prange

try:
    from ._matmul import bmm_into as _native_bmm
except ImportError:  # extension not built
    _native_bmm = None


@njit(cache=True, boundscheck=False)
def _rows(A, Bm, C, i, ni):
    K = A.shape[1]
    N = Bm.shape[1]
    if ni == 4:
        c0 = C[i]
        c1 = C[i + 1]
        c2 = C[i + 2]
        c3 = C[i + 3]
        for j in range(N):
            c0[j] = 0.0
            c1[j] = 0.0
            c2[j] = 0.0
            c3[j] = 0.0
        for p in range(K):
            a0 = A[i, p]
            a1 = A[i + 1, p]
            a2 = A[i + 2, p]
            a3 = A[i + 3, p]
            br = Bm[p]
            for j in range(N):
                bv = br[j]
                c0[j] += a0 * bv
                c1[j] += a1 * bv
                c2[j] += a2 * bv
                c3[j] += a3 * bv
    else:
        for r in range(i, i + ni):
            c = C[r]
            for j in range(N):
                c[j] = 0.0
            for p in range(K):
                av = A[r, p]
                br = Bm[p]
                for j in range(N):
                    c[j] += av * br[j]


@njit(cache=True, boundscheck=False)
def _bmm_serial(a, b, out):
    nb, M, _ = a.shape
    shared = b.shape[0] == 1
    for bb in range(nb):
        Bm = b[0] if shared else b[bb]
        for i in range(0, M, 4):
            _rows(a[bb], Bm, out[bb], i, min(4, M - i))
    return out


@njit(cache=True, parallel=True, boundscheck=False)
def _bmm_parallel(a, b, out):
    nb, M, _ = a.shape
    shared = b.shape[0] == 1
    nblk = (M + 3) // 4
    for t in prange(nb * nblk):
        bb = t // nblk
        i = (t % nblk) * 4
        Bm = b[0] if shared else b[bb]
        _rows(a[bb], Bm, out[bb], i, min(4, M - i))
    return out


def native_available() -> bool:
    return _native_bmm is not None


def _thread_count() -> int:
    try:
        n = int(os.environ.get("SQTK_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, min(n, numba.config.NUMBA_NUM_THREADS))


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched product of ``a`` [nb, M, K] and ``b`` [nb or 1, K, N]."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
    if a.shape[1] == 0 or b.shape[2] == 0:
        return out
    threads = _thread_count()
    if threads == 1 and _native_bmm is not None and a.dtype == np.float32:
        _native_bmm(a, b, out)
        return out
    if threads > 1:
        numba.set_num_threads(threads)
        return _bmm_parallel(a, b, out)
    return _bmm_serial(a, b, out)


def reference_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pure-Python triple loop; the oracle ``bmm`` must match exactly."""
    m, k = a.shape
    n = b.shape[1]
    t = a.dtype.type
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            s = t(0)
            for p in range(k):
                s = t(s + t(a[i, p] * b[p, j]))
            out[i, j] = s
    return out
