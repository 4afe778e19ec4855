# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must agree bit-for-bit with the fallbacks in kernels.py."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def nearest_center(const double[:, ::1] x, const double[:, ::1] centers):
    cdef Py_ssize_t n = x.shape[0], k = centers.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, m
    cdef double acc, diff, best
    cdef Py_ssize_t best_j
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] lab = labels
    cdef double[::1] dst = dists
    with nogil:
        for i in range(n):
            best = 0.0
            best_j = -1
            for j in range(k):
                acc = 0.0
                for m in range(d):
                    diff = x[i, m] - centers[j, m]
                    acc = acc + diff * diff
                if best_j < 0 or acc < best:
                    best = acc
                    best_j = j
            lab[i] = best_j
            dst[i] = best
    return labels, dists


def overlap_add(const double[:, ::1] frames, Py_ssize_t hop, Py_ssize_t out_len):
    cdef Py_ssize_t n = frames.shape[0], width = frames.shape[1]
    cdef Py_ssize_t i, j, start
    out = np.zeros(out_len, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            start = i * hop
            for j in range(width):
                o[start + j] = o[start + j] + frames[i, j]
    return out

