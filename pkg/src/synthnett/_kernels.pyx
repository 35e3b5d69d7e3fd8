# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels used by the convolution ops."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int k, int stride):
    """Unfold a padded (B, C, Hp, Wp) array into (B*Ho*Wo, C*k*k) patch rows."""
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t Ho = (Hp - k) // stride + 1
    cdef Py_ssize_t Wo = (Wp - k) // stride + 1
    out = np.empty((B * Ho * Wo, C * k * k), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, c, i, j, u, v, row, col
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    row = (b * Ho + i) * Wo + j
                    col = 0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                cols[row, col] = xp[b, c, i * stride + u, j * stride + v]
                                col += 1
    return out


def col2im(const double[:, ::1] cols, Py_ssize_t B, Py_ssize_t C,
           Py_ssize_t Hp, Py_ssize_t Wp, int k, int stride):
    """Scatter-add patch rows back into a zero-initialised (B, C, Hp, Wp) array."""
    cdef Py_ssize_t Ho = (Hp - k) // stride + 1
    cdef Py_ssize_t Wo = (Wp - k) // stride + 1
    if cols.shape[0] != B * Ho * Wo or cols.shape[1] != C * k * k:
        raise ValueError("cols shape does not match the requested geometry")
    out = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = out
    cdef Py_ssize_t b, c, i, j, u, v, row, col
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    row = (b * Ho + i) * Wo + j
                    col = 0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                xp[b, c, i * stride + u, j * stride + v] += cols[row, col]
                                col += 1
    return out
