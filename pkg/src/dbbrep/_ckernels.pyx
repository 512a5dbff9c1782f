# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernel: per-group im2col followed by a BLAS dgemm."""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm


def conv2d_nchw(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                int sh, int sw, int groups):
    """Grouped cross-correlation of an already padded float64 input.

    Same contract as the numpy fallback: ``x`` is N x C x Hp x Wp, ``w`` is
    D x (C/groups) x Kh x Kw, result is N x D x Ho x Wo without bias.
    """
    cdef Py_ssize_t n = x.shape[0], hp = x.shape[2], wp = x.shape[3]
    cdef Py_ssize_t d = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // sh + 1
    cdef Py_ssize_t wo = (wp - kw) // sw + 1
    cdef Py_ssize_t dg = d // groups
    cdef Py_ssize_t i, g, ci, u, v, y, xx, row, ch, base

    out = np.empty((n, d, ho, wo), dtype=np.float64)
    cols_arr = np.empty((cg * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef double[:, ::1] cols = cols_arr

    # row-major (dg x K) @ (K x HW) == column-major (HW x K) @ (K x dg)
    cdef int m = <int>(ho * wo)
    cdef int nn = <int>dg
    cdef int k = <int>(cg * kh * kw)
    cdef double alpha = 1.0, beta = 0.0
    cdef char trans = b'N'

    if n == 0 or d == 0 or m == 0:
        return out

    with nogil:
        for i in range(n):
            for g in range(groups):
                for ci in range(cg):
                    ch = g * cg + ci
                    for u in range(kh):
                        for v in range(kw):
                            row = (ci * kh + u) * kw + v
                            for y in range(ho):
                                base = y * wo
                                for xx in range(wo):
                                    cols[row, base + xx] = x[i, ch, y * sh + u, xx * sw + v]
                dgemm(&trans, &trans, &m, &nn, &k, &alpha,
                      &cols[0, 0], &m,
                      <double *>&w[g * dg, 0, 0, 0], &k,
                      &beta, &o[i, g * dg, 0, 0], &m)
    return out
