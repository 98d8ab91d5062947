# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled core for the adaptive separable convolution.

Forward pass: one Kahan-compensated accumulator per output element, taps
visited j (vertical) outer, i (horizontal) inner. Rows are distributed over
OpenMP threads; each output element is produced by exactly one thread in a
fixed order, so results are identical for any thread count.

Compiled with -ffp-contract=off so the float sequence matches the numpy
fallback bit for bit.
"""

from cython.parallel cimport parallel, prange
from libc.stdlib cimport free, malloc

import numpy as np

ctypedef fused real:
    float
    double


def sepconv_forward(real[:, :, ::1] padded, real[:, :, ::1] kh,
                    real[:, :, ::1] kv, real[:, :, ::1] out, int num_threads):
    cdef Py_ssize_t C = padded.shape[0]
    cdef Py_ssize_t K = kh.shape[0]
    cdef Py_ssize_t H = kh.shape[1]
    cdef Py_ssize_t W = kh.shape[2]
    cdef Py_ssize_t cy, c, y, j, i, x
    cdef real term, yk, t
    cdef real *s
    cdef real *comp
    if num_threads < 1:
        num_threads = 1
    with nogil, parallel(num_threads=num_threads):
        s = <real *> malloc(W * sizeof(real))
        comp = <real *> malloc(W * sizeof(real))
        for cy in prange(C * H, schedule='static'):
            c = cy // H
            y = cy - c * H
            for x in range(W):
                s[x] = 0
                comp[x] = 0
            for j in range(K):
                for i in range(K):
                    for x in range(W):
                        term = (kv[j, y, x] * kh[i, y, x]) * padded[c, y + j, x + i]
                        yk = term - comp[x]
                        t = s[x] + yk
                        comp[x] = (t - s[x]) - yk
                        s[x] = t
            for x in range(W):
                out[c, y, x] = s[x]
        free(s)
        free(comp)


def sepconv_forward_batch(real[:, :, :, ::1] padded, real[:, :, :, ::1] kh,
                          real[:, :, :, ::1] kv, real[:, :, :, ::1] out,
                          int num_threads):
    # Identical per-element math to sepconv_forward, one parallel region
    # for the whole [B, ...] batch.
    cdef Py_ssize_t B = padded.shape[0]
    cdef Py_ssize_t C = padded.shape[1]
    cdef Py_ssize_t K = kh.shape[1]
    cdef Py_ssize_t H = kh.shape[2]
    cdef Py_ssize_t W = kh.shape[3]
    cdef Py_ssize_t bcy, b, c, y, j, i, x, rem
    cdef real term, yk, t
    cdef real *s
    cdef real *comp
    if num_threads < 1:
        num_threads = 1
    with nogil, parallel(num_threads=num_threads):
        s = <real *> malloc(W * sizeof(real))
        comp = <real *> malloc(W * sizeof(real))
        for bcy in prange(B * C * H, schedule='static'):
            b = bcy // (C * H)
            rem = bcy - b * C * H
            c = rem // H
            y = rem - c * H
            for x in range(W):
                s[x] = 0
                comp[x] = 0
            for j in range(K):
                for i in range(K):
                    for x in range(W):
                        term = (kv[b, j, y, x] * kh[b, i, y, x]) * padded[b, c, y + j, x + i]
                        yk = term - comp[x]
                        t = s[x] + yk
                        comp[x] = (t - s[x]) - yk
                        s[x] = t
            for x in range(W):
                out[b, c, y, x] = s[x]
        free(s)
        free(comp)


def sepconv_backward(real[:, :, ::1] padded, real[:, :, ::1] kh,
                     real[:, :, ::1] kv, real[:, :, ::1] grad_out,
                     real[:, :, ::1] grad_padded, real[:, :, ::1] grad_kh,
                     real[:, :, ::1] grad_kv, int num_threads):
    # Serial by design: grad_kh/grad_kv accumulate across channels and the
    # padded-input scatter overlaps across taps, and the (c, j, i) order is
    # part of the determinism contract shared with the numpy fallback.
    cdef Py_ssize_t C = padded.shape[0]
    cdef Py_ssize_t K = kh.shape[0]
    cdef Py_ssize_t H = kh.shape[1]
    cdef Py_ssize_t W = kh.shape[2]
    cdef Py_ssize_t c, j, i, y, x
    cdef real gval, window
    grad_padded[:, :, :] = 0
    grad_kh[:, :, :] = 0
    grad_kv[:, :, :] = 0
    with nogil:
        for c in range(C):
            for j in range(K):
                for i in range(K):
                    for y in range(H):
                        for x in range(W):
                            gval = grad_out[c, y, x]
                            window = padded[c, y + j, x + i]
                            grad_kh[i, y, x] += (gval * kv[j, y, x]) * window
                            grad_kv[j, y, x] += (gval * kh[i, y, x]) * window
                            grad_padded[c, y + j, x + i] += (kv[j, y, x] * kh[i, y, x]) * gval
