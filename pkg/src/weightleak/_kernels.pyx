# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled hot kernels: float32 expf and sequential dense layers."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()

cdef extern from "_expf.h" nogil:
    float wl_expf(float x, int *code)
    void wl_dense(const float *w, const float *b, const float *x, float *out,
                  int64_t n, int64_t m)


def expf(x):
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] xs = np.ascontiguousarray(x, dtype=np.float32).ravel()
    cdef Py_ssize_t n = xs.shape[0], i
    cdef cnp.ndarray[cnp.float32_t, ndim=1] y = np.empty(n, dtype=np.float32)
    cdef cnp.ndarray[cnp.int8_t, ndim=1] case = np.empty(n, dtype=np.int8)
    cdef int code
    with nogil:
        for i in range(n):
            y[i] = wl_expf(xs[i], &code)
            case[i] = <cnp.int8_t>code
    shape = np.shape(x)
    return y.reshape(shape), case.reshape(shape)


def dense(w, b, x):
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] W = np.ascontiguousarray(w, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] B = np.ascontiguousarray(b, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] X = np.ascontiguousarray(x, dtype=np.float32)
    cdef int64_t n = W.shape[0], m = W.shape[1]
    if X.shape[0] != m or B.shape[0] != n:
        raise ValueError("shape mismatch")
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] out = np.empty(n, dtype=np.float32)
    with nogil:
        wl_dense(&W[0, 0], &B[0], &X[0], &out[0], n, m)
    return out


def dense_batch(w, b, xs):
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] W = np.ascontiguousarray(w, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] B = np.ascontiguousarray(b, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] X = np.ascontiguousarray(xs, dtype=np.float32)
    cdef int64_t n = W.shape[0], m = W.shape[1], k = X.shape[0], r
    if X.shape[1] != m or B.shape[0] != n:
        raise ValueError("shape mismatch")
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] out = np.empty((k, n), dtype=np.float32)
    if k == 0:
        return out
    with nogil:
        for r in range(k):
            wl_dense(&W[0, 0], &B[0], &X[r, 0], &out[r, 0], n, m)
    return out
