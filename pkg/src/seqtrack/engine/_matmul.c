/* Register-blocked float32 matmul with a fixed accumulation order.
 *
 * Each output element is ((0 + a0*b0) + a1*b1) + ... with k ascending and the
 * product and sum rounded separately. Build with -ffp-contract=off so the
 * compiler never fuses them. Vectorization runs across output columns only,
 * so results match the scalar triple loop bit for bit.
 */
#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <stddef.h>
#include <string.h>

typedef float v16 __attribute__((vector_size(64)));

static inline v16 load16(const float *p) { v16 v; memcpy(&v, p, sizeof v); return v; }
static inline void store16(float *p, v16 v) { memcpy(p, &v, sizeof v); }
static inline v16 splat(float x) { return (v16){x, x, x, x, x, x, x, x, x, x, x, x, x, x, x, x}; }

#define MICRO_KERNEL(R, V)                                                                    \
    static void tile_##R##_##V(const float *A, const float *B, float *C, Py_ssize_t K,        \
                               Py_ssize_t N, Py_ssize_t i, Py_ssize_t j) {                     \
        v16 acc[R][V];                                                                        \
        for (int r = 0; r < R; ++r)                                                           \
            for (int v = 0; v < V; ++v) acc[r][v] = splat(0.f);                               \
        const float *a = A + i * K;                                                           \
        for (Py_ssize_t p = 0; p < K; ++p) {                                                  \
            const float *brow = B + p * N + j;                                                \
            v16 b[V];                                                                         \
            for (int v = 0; v < V; ++v) b[v] = load16(brow + 16 * v);                         \
            for (int r = 0; r < R; ++r) {                                                     \
                v16 x = splat(a[r * K + p]);                                                  \
                for (int v = 0; v < V; ++v) acc[r][v] = acc[r][v] + x * b[v];                 \
            }                                                                                 \
        }                                                                                     \
        for (int r = 0; r < R; ++r)                                                           \
            for (int v = 0; v < V; ++v) store16(C + (i + r) * N + j + 16 * v, acc[r][v]);     \
    }

MICRO_KERNEL(6, 2)
MICRO_KERNEL(1, 2)
MICRO_KERNEL(8, 1)
MICRO_KERNEL(1, 1)

static void column_tail(const float *A, const float *B, float *C, Py_ssize_t M, Py_ssize_t K,
                        Py_ssize_t N, Py_ssize_t j0) {
    for (Py_ssize_t i = 0; i < M; ++i) {
        float *c = C + i * N;
        for (Py_ssize_t j = j0; j < N; ++j) c[j] = 0.f;
        for (Py_ssize_t p = 0; p < K; ++p) {
            float x = A[i * K + p];
            const float *brow = B + p * N;
            for (Py_ssize_t j = j0; j < N; ++j) c[j] += x * brow[j];
        }
    }
}

static void matmul_f32(const float *A, const float *B, float *C, Py_ssize_t M, Py_ssize_t K,
                       Py_ssize_t N) {
    Py_ssize_t j = 0;
    for (; j + 32 <= N; j += 32) {
        Py_ssize_t i = 0;
        for (; i + 6 <= M; i += 6) tile_6_2(A, B, C, K, N, i, j);
        for (; i < M; ++i) tile_1_2(A, B, C, K, N, i, j);
    }
    for (; j + 16 <= N; j += 16) {
        Py_ssize_t i = 0;
        for (; i + 8 <= M; i += 8) tile_8_1(A, B, C, K, N, i, j);
        for (; i < M; ++i) tile_1_1(A, B, C, K, N, i, j);
    }
    if (j < N) column_tail(A, B, C, M, K, N, j);
}

static int get_buffer(PyObject *obj, Py_buffer *view, int writable, const char *name) {
    int flags = PyBUF_C_CONTIGUOUS | PyBUF_FORMAT | (writable ? PyBUF_WRITABLE : 0);
    if (PyObject_GetBuffer(obj, view, flags) < 0) return -1;
    if (view->ndim != 3 || view->itemsize != 4 || strcmp(view->format, "f") != 0) {
        PyErr_Format(PyExc_TypeError, "%s must be a C-contiguous 3-d float32 array", name);
        PyBuffer_Release(view);
        return -1;
    }
    return 0;
}

static PyObject *bmm_into(PyObject *self, PyObject *args) {
    PyObject *oa, *ob, *oc;
    if (!PyArg_ParseTuple(args, "OOO", &oa, &ob, &oc)) return NULL;
    Py_buffer a, b, c;
    if (get_buffer(oa, &a, 0, "a") < 0) return NULL;
    if (get_buffer(ob, &b, 0, "b") < 0) { PyBuffer_Release(&a); return NULL; }
    if (get_buffer(oc, &c, 1, "out") < 0) { PyBuffer_Release(&a); PyBuffer_Release(&b); return NULL; }

    Py_ssize_t nb = a.shape[0], M = a.shape[1], K = a.shape[2], N = b.shape[2];
    int ok = b.shape[1] == K && (b.shape[0] == nb || b.shape[0] == 1) && c.shape[0] == nb &&
             c.shape[1] == M && c.shape[2] == N;
    if (ok) {
        const float *A = a.buf, *B = b.buf;
        float *C = c.buf;
        Py_ssize_t bstride = b.shape[0] == 1 ? 0 : K * N;
        Py_BEGIN_ALLOW_THREADS
        for (Py_ssize_t t = 0; t < nb; ++t)
            matmul_f32(A + t * M * K, B + t * bstride, C + t * M * N, M, K, N);
        Py_END_ALLOW_THREADS
    }
    PyBuffer_Release(&a);
    PyBuffer_Release(&b);
    PyBuffer_Release(&c);
    if (!ok) {
        PyErr_SetString(PyExc_ValueError, "incompatible shapes for batched matmul");
        return NULL;
    }
    Py_RETURN_NONE;
}

static PyMethodDef methods[] = {
    {"bmm_into", bmm_into, METH_VARARGS, "bmm_into(a, b, out): out[t] = a[t] @ b[t or 0] in float32."},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef module = {PyModuleDef_HEAD_INIT, "_matmul", NULL, -1, methods};

PyMODINIT_FUNC PyInit__matmul(void) { return PyModule_Create(&module); }
