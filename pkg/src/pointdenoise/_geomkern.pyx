# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled point-set kernels. Same contracts as ``_geomkern_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def fps(const double[:, ::1] pts, Py_ssize_t m, Py_ssize_t start):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t i, j, cur, best
    cdef double d, dx, dy, dz, bestd
    out_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    mind_arr = np.full(n, INFINITY, dtype=np.float64)
    cdef double[::1] mind = mind_arr
    if m == 0:
        return out_arr
    cur = start
    out[0] = cur
    # selected points are marked -1 so duplicates cannot be picked twice
    mind[cur] = -1.0
    for i in range(1, m):
        best = 0
        bestd = -1.0
        for j in range(n):
            dx = pts[j, 0] - pts[cur, 0]
            dy = pts[j, 1] - pts[cur, 1]
            dz = pts[j, 2] - pts[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            # strict '>' keeps the lowest index on ties
            if mind[j] > bestd:
                bestd = mind[j]
                best = j
        cur = best
        out[i] = cur
        mind[cur] = -1.0
    return out_arr


def knn(const double[:, ::1] pts, const double[:, ::1] centers, Py_ssize_t k):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t g = centers.shape[0]
    cdef Py_ssize_t c, j, p, filled
    cdef double d, dx, dy, dz
    idx_arr = np.empty((g, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    bd_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] bd = bd_arr
    for c in range(g):
        filled = 0
        for j in range(n):
            dx = pts[j, 0] - centers[c, 0]
            dy = pts[j, 1] - centers[c, 1]
            dz = pts[j, 2] - centers[c, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= bd[k - 1]:
                continue
            # insertion into the sorted k-best list; equal distances stay behind
            if filled < k:
                p = filled
                filled += 1
            else:
                p = k - 1
            while p > 0 and bd[p - 1] > d:
                bd[p] = bd[p - 1]
                idx[c, p] = idx[c, p - 1]
                p -= 1
            bd[p] = d
            idx[c, p] = j
    return idx_arr


def nn_sqdist(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t na = a.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    cdef Py_ssize_t i, j
    cdef double d, dx, dy, dz, best
    out_arr = np.empty(na, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(na):
        best = INFINITY
        for j in range(nb):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        out[i] = best
    return out_arr
