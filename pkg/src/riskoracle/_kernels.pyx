# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: pairwise Jensen-Shannon divergence and its gradient."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()


def pairwise_js(p):
    cdef double[:, ::1] P = np.ascontiguousarray(p, dtype=np.float64)
    cdef Py_ssize_t m = P.shape[0], d = P.shape[1]
    out = np.zeros((m, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef double[::1] ent = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef double acc, mid, v
    with nogil:
        for i in range(m):
            acc = 0.0
            for k in range(d):
                acc = acc + P[i, k] * log(P[i, k])
            ent[i] = acc
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for k in range(d):
                    mid = 0.5 * (P[i, k] + P[j, k])
                    acc = acc + mid * log(mid)
                v = 0.5 * (ent[i] + ent[j]) - acc
                if v < 0.0:
                    v = 0.0
                O[i, j] = v
                O[j, i] = v
    return out


def pairwise_js_grad(p, g):
    cdef double[:, ::1] P = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, ::1] G = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t m = P.shape[0], d = P.shape[1]
    cdef double[:, ::1] L2P = np.log(2.0 * np.asarray(P))
    out = np.zeros((m, d), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef Py_ssize_t i, j, k
    cdef double w, lsum
    with nogil:
        for i in range(m):
            for j in range(i + 1, m):
                w = 0.5 * (G[i, j] + G[j, i])
                if w == 0.0:
                    continue
                for k in range(d):
                    lsum = log(P[i, k] + P[j, k])
                    O[i, k] += w * (L2P[i, k] - lsum)
                    O[j, k] += w * (L2P[j, k] - lsum)
    return out
