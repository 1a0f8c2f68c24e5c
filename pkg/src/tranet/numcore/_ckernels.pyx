# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for patch extraction and max pooling."""

import numpy as np

from cython cimport floating


def im2col(floating[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t b, ch, i, j, r, q, row, col, y
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    col = 0
                    for r in range(ho):
                        y = i + r * stride
                        for q in range(wo):
                            o[b, row, col] = xp[b, ch, y, j + q * stride]
                            col += 1
    return out


def col2im(floating[:, :, ::1] cols, int c, int hp, int wp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t b, ch, i, j, r, q, row, col, y
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    col = 0
                    for r in range(ho):
                        y = i + r * stride
                        for q in range(wo):
                            dx[b, ch, y, j + q * stride] += cols[b, row, col]
                            col += 1
    return out


def maxpool_forward(floating[:, :, :, ::1] x, int k, int stride, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t c = x.shape[1]
    cdef Py_ssize_t w = x.shape[3]
    cdef Py_ssize_t b, ch, r, q, i, j, y0, x0, best_idx
    cdef floating best, v
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((n, c, ho, wo), dtype=dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] o = out
    cdef long long[:, :, :, ::1] a = arg
    for b in range(n):
        for ch in range(c):
            for r in range(ho):
                y0 = r * stride
                for q in range(wo):
                    x0 = q * stride
                    best = x[b, ch, y0, x0]
                    best_idx = y0 * w + x0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, y0 + i, x0 + j]
                            if v > best:
                                best = v
                                best_idx = (y0 + i) * w + x0 + j
                    o[b, ch, r, q] = best
                    a[b, ch, r, q] = best_idx
    return out, arg


def maxpool_backward(floating[:, :, :, ::1] dout, long long[:, :, :, ::1] arg, int h, int w):
    cdef Py_ssize_t n = dout.shape[0]
    cdef Py_ssize_t c = dout.shape[1]
    cdef Py_ssize_t ho = dout.shape[2]
    cdef Py_ssize_t wo = dout.shape[3]
    cdef Py_ssize_t b, ch, r, q, idx
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    for b in range(n):
        for ch in range(c):
            for r in range(ho):
                for q in range(wo):
                    idx = arg[b, ch, r, q]
                    dx[b, ch, idx // w, idx % w] += dout[b, ch, r, q]
    return out
