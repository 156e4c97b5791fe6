# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the quadratic geometry kernels.

Semantics (including lowest-index tie breaking) must match
cloudadapt.kernels._numpy exactly; the test suite compares the two.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def pairwise_sqdist(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], d = av.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, c
    cdef double s, t
    for i in range(n):
        for j in range(m):
            s = 0.0
            for c in range(d):
                t = av[i, c] - bv[j, c]
                s += t * t
            ov[i, j] = s
    return out


def nearest_neighbor(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], d = av.shape[1]
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] ov = out
    cdef Py_ssize_t i, j, c, best
    cdef double s, t, bestd
    for i in range(n):
        best = 0
        bestd = 0.0
        for j in range(m):
            s = 0.0
            for c in range(d):
                t = av[i, c] - bv[j, c]
                s += t * t
            if j == 0 or s < bestd:
                bestd = s
                best = j
        ov[i] = best
    return out


def knn_indices(points, int k):
    cdef double[:, ::1] pv = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t m = pv.shape[0], d = pv.shape[1]
    if not 1 <= k <= m - 1:
        raise ValueError(f"knn_indices: need 1 <= k <= m-1, got k={k}, m={m}")
    out = np.empty((m, k), dtype=np.int64)
    cdef long long[:, ::1] ov = out
    dist = np.empty(m, dtype=np.float64)
    used = np.empty(m, dtype=np.uint8)
    cdef double[::1] dv = dist
    cdef unsigned char[::1] uv = used
    cdef Py_ssize_t i, j, c, t, best
    cdef double s, tt, bestd
    for i in range(m):
        for j in range(m):
            s = 0.0
            for c in range(d):
                tt = pv[i, c] - pv[j, c]
                s += tt * tt
            dv[j] = s
            uv[j] = 0
        uv[i] = 1
        # k selection passes; strict < keeps the lowest index on ties
        for t in range(k):
            best = -1
            bestd = 0.0
            for j in range(m):
                if uv[j]:
                    continue
                if best < 0 or dv[j] < bestd:
                    bestd = dv[j]
                    best = j
            ov[i, t] = best
            uv[best] = 1
    return out


def fps_indices(points, Py_ssize_t n, Py_ssize_t start):
    cdef double[:, ::1] pv = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t m = pv.shape[0], d = pv.shape[1]
    if not 1 <= n <= m:
        raise ValueError(f"fps_indices: need 1 <= n <= m, got n={n}, m={m}")
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] ov = out
    mindist = np.empty(m, dtype=np.float64)
    cdef double[::1] mv = mindist
    cdef Py_ssize_t i, c, t, last, best
    cdef double s, tt, bestd
    ov[0] = start
    for i in range(m):
        s = 0.0
        for c in range(d):
            tt = pv[i, c] - pv[start, c]
            s += tt * tt
        mv[i] = s
    mv[start] = -1.0
    for t in range(1, n):
        best = 0
        bestd = mv[0]
        for i in range(1, m):
            if mv[i] > bestd:
                bestd = mv[i]
                best = i
        ov[t] = best
        last = best
        for i in range(m):
            if mv[i] < 0.0:
                continue
            s = 0.0
            for c in range(d):
                tt = pv[i, c] - pv[last, c]
                s += tt * tt
            if s < mv[i]:
                mv[i] = s
        mv[last] = -1.0
    return out
