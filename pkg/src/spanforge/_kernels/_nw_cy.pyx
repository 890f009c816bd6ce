# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled Needleman-Wunsch kernel.

Mirrors _nw_py.align_global exactly, including the diagonal > up > left
traceback tie-break, so the two backends are interchangeable.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

GAP_CODE = -1


def align_global(a, b, substitution, double gap):
    cdef cnp.int32_t[::1] av = np.ascontiguousarray(a, dtype=np.int32)
    cdef cnp.int32_t[::1] bv = np.ascontiguousarray(b, dtype=np.int32)
    cdef cnp.float64_t[:, ::1] sub = np.ascontiguousarray(substitution, dtype=np.float64)
    cdef Py_ssize_t m = av.shape[0]
    cdef Py_ssize_t n = bv.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] score = np.empty((m + 1, n + 1), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] h = score
    cdef Py_ssize_t i, j
    cdef double diag, up, left, best

    h[0, 0] = 0.0
    for j in range(1, n + 1):
        h[0, j] = j * gap
    for i in range(1, m + 1):
        h[i, 0] = i * gap
        for j in range(1, n + 1):
            diag = h[i - 1, j - 1] + sub[av[i - 1], bv[j - 1]]
            up = h[i - 1, j] + gap
            left = h[i, j - 1] + gap
            best = diag
            if up > best:
                best = up
            if left > best:
                best = left
            h[i, j] = best

    cdef cnp.ndarray[cnp.int32_t, ndim=1] out_a = np.empty(m + n, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] out_b = np.empty(m + n, dtype=np.int32)
    cdef cnp.int32_t[::1] oa = out_a
    cdef cnp.int32_t[::1] ob = out_b
    cdef Py_ssize_t k = 0
    i = m
    j = n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and h[i, j] == h[i - 1, j - 1] + sub[av[i - 1], bv[j - 1]]:
            oa[k] = av[i - 1]
            ob[k] = bv[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and h[i, j] == h[i - 1, j] + gap:
            oa[k] = av[i - 1]
            ob[k] = GAP_CODE
            i -= 1
        else:
            oa[k] = GAP_CODE
            ob[k] = bv[j - 1]
            j -= 1
        k += 1

    return float(h[m, n]), out_a[:k][::-1].copy(), out_b[:k][::-1].copy()
