# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Must stay numerically interchangeable with _fallback."""

import numpy as np

from libc.math cimport floor, INFINITY


def nearest_code(const double[:, ::1] z, const double[:, ::1] codebook):
    """Index of the closest codebook row for every row of ``z`` (ties -> lowest index)."""
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t k = codebook.shape[0]
    cdef Py_ssize_t d = z.shape[1]
    cdef Py_ssize_t i, j, c, best_j
    cdef double best, dist, diff
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] idx = out
    with nogil:
        for i in range(n):
            best = INFINITY
            best_j = 0
            for j in range(k):
                dist = 0.0
                for c in range(d):
                    diff = z[i, c] - codebook[j, c]
                    dist = dist + diff * diff
                if dist < best:
                    best = dist
                    best_j = j
            idx[i] = best_j
    return out


def block_dct_quantize(const double[:, :, ::1] planes, const double[:, :, ::1] steps,
                       const double[:, ::1] m):
    """8x8 DCT, uniform quantization with per-plane step tables, inverse DCT.

    ``planes`` is (C, H, W) with H and W multiples of 8; ``steps`` is (C, 8, 8);
    ``m`` is the orthonormal 8x8 DCT-II basis (rows are frequencies).
    """
    cdef Py_ssize_t nc = planes.shape[0]
    cdef Py_ssize_t h = planes.shape[1]
    cdef Py_ssize_t w = planes.shape[2]
    if h % 8 or w % 8:
        raise ValueError("plane size must be a multiple of 8")
    if steps.shape[0] != nc or steps.shape[1] != 8 or steps.shape[2] != 8:
        raise ValueError("steps must be (C, 8, 8)")
    out = np.empty((nc, h, w), dtype=np.float64)
    cdef double[:, :, ::1] res = out
    cdef double blk[8][8]
    cdef double tmp[8][8]
    cdef double coef[8][8]
    cdef Py_ssize_t ch, by, bx, u, v, x, y
    cdef double acc, st
    with nogil:
        for ch in range(nc):
            for by in range(0, h, 8):
                for bx in range(0, w, 8):
                    for x in range(8):
                        for y in range(8):
                            blk[x][y] = planes[ch, by + x, bx + y]
                    # forward: coef = M @ blk @ M^T
                    for u in range(8):
                        for y in range(8):
                            acc = 0.0
                            for x in range(8):
                                acc = acc + m[u, x] * blk[x][y]
                            tmp[u][y] = acc
                    for u in range(8):
                        for v in range(8):
                            acc = 0.0
                            for y in range(8):
                                acc = acc + tmp[u][y] * m[v, y]
                            st = steps[ch, u, v]
                            coef[u][v] = floor(acc / st + 0.5) * st
                    # inverse: blk = M^T @ coef @ M
                    for x in range(8):
                        for v in range(8):
                            acc = 0.0
                            for u in range(8):
                                acc = acc + m[u, x] * coef[u][v]
                            tmp[x][v] = acc
                    for x in range(8):
                        for y in range(8):
                            acc = 0.0
                            for v in range(8):
                                acc = acc + tmp[x][v] * m[v, y]
                            res[ch, by + x, bx + y] = acc
    return out
