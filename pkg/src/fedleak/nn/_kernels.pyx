# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution-stack kernels (same contract as ``_kernels_py``)."""

import numpy as np
cimport numpy as cnp

from libc.string cimport memcpy

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t k):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t row_len = k * k * c
    out = np.zeros((b * h * w, row_len), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t n, y, xx, i, sy, j0, j1, row
    with nogil:
        for n in range(b):
            for y in range(h):
                for xx in range(w):
                    row = (n * h + y) * w + xx
                    # valid kernel columns j0..j1-1 map to one contiguous input run
                    j0 = p - xx if xx < p else 0
                    j1 = w - xx + p if xx + k - p > w else k
                    for i in range(k):
                        sy = y + i - p
                        if sy < 0 or sy >= h:
                            continue
                        memcpy(&cols[row, (i * k + j0) * c], &x[n, sy, xx + j0 - p, 0],
                               (j1 - j0) * c * sizeof(double))
    return out


def col2im(dcols_in, shape, Py_ssize_t k):
    cdef Py_ssize_t b = shape[0], h = shape[1], w = shape[2], c = shape[3]
    cdef Py_ssize_t p = k // 2
    cdef const double[:, ::1] dcols = np.ascontiguousarray(dcols_in, dtype=np.float64).reshape(b * h * w, k * k * c)
    out = np.zeros((b, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, y, xx, i, j, ch, sy, sx, row, base
    # gather form: each output pixel sums its 25 contributions in (i, j)
    # order, the same order the numpy reference adds its shifted slices
    with nogil:
        for n in range(b):
            for y in range(h):
                for xx in range(w):
                    for i in range(k):
                        sy = y - i + p
                        if sy < 0 or sy >= h:
                            continue
                        for j in range(k):
                            sx = xx - j + p
                            if sx < 0 or sx >= w:
                                continue
                            row = (n * h + sy) * w + sx
                            base = (i * k + j) * c
                            for ch in range(c):
                                dx[n, y, xx, ch] += dcols[row, base + ch]
    return out


def relu_drop_pool_forward(const double[:, :, :, ::1] z, drop_in, Py_ssize_t ph, Py_ssize_t pw):
    """Max pool of ``relu(z) * drop`` (``drop`` may be None)."""
    cdef Py_ssize_t b = z.shape[0], h = z.shape[1], w = z.shape[2], c = z.shape[3]
    cdef Py_ssize_t ho = h // ph, wo = w // pw
    cdef bint has_drop = drop_in is not None
    cdef const double[:, :, :, ::1] drop
    if has_drop:
        drop = np.ascontiguousarray(drop_in, dtype=np.float64).reshape(b, h, w, c)
    else:
        drop = z
    out_a = np.empty((b, ho, wo, c), dtype=np.float64)
    idx_a = np.empty((b, ho, wo, c), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_a
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_a
    cdef Py_ssize_t n, y, xx, ch, di, dj, best_i
    cdef double best, v
    with nogil:
        for n in range(b):
            for y in range(ho):
                for xx in range(wo):
                    for ch in range(c):
                        best_i = -1
                        for di in range(ph):
                            for dj in range(pw):
                                v = z[n, y * ph + di, xx * pw + dj, ch]
                                if not v > 0:
                                    v = 0.0
                                if has_drop:
                                    v = v * drop[n, y * ph + di, xx * pw + dj, ch]
                                if best_i < 0 or v > best:
                                    best = v
                                    best_i = di * pw + dj
                        out[n, y, xx, ch] = best
                        idx[n, y, xx, ch] = best_i
    return out_a, idx_a


def relu_drop_pool_backward(const double[:, :, :, ::1] dout, const cnp.int64_t[:, :, :, ::1] idx,
                            const double[:, :, :, ::1] z, drop_in, Py_ssize_t ph, Py_ssize_t pw):
    """Gradient w.r.t. ``z`` of :func:`relu_drop_pool_forward`."""
    cdef Py_ssize_t b = z.shape[0], h = z.shape[1], w = z.shape[2], c = z.shape[3]
    cdef Py_ssize_t ho = dout.shape[1], wo = dout.shape[2]
    cdef bint has_drop = drop_in is not None
    cdef const double[:, :, :, ::1] drop
    if has_drop:
        drop = np.ascontiguousarray(drop_in, dtype=np.float64).reshape(b, h, w, c)
    else:
        drop = z
    dz_a = np.zeros((b, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dz = dz_a
    cdef Py_ssize_t n, y, xx, ch, t, sy, sx
    cdef double g
    with nogil:
        for n in range(b):
            for y in range(ho):
                for xx in range(wo):
                    for ch in range(c):
                        t = idx[n, y, xx, ch]
                        sy = y * ph + t // pw
                        sx = xx * pw + t % pw
                        g = dout[n, y, xx, ch]
                        if has_drop:
                            g = g * drop[n, sy, sx, ch]
                        if z[n, sy, sx, ch] > 0:
                            dz[n, sy, sx, ch] = g
    return dz_a


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h // ph, wo = w // pw
    out_a = np.empty((b, ho, wo, c), dtype=np.float64)
    idx_a = np.empty((b, ho, wo, c), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_a
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_a
    cdef Py_ssize_t n, y, xx, ch, di, dj, best_i
    cdef double best, v
    with nogil:
        for n in range(b):
            for y in range(ho):
                for xx in range(wo):
                    for ch in range(c):
                        best = x[n, y * ph, xx * pw, ch]
                        best_i = 0
                        for di in range(ph):
                            for dj in range(pw):
                                v = x[n, y * ph + di, xx * pw + dj, ch]
                                if v > best:
                                    best = v
                                    best_i = di * pw + dj
                        out[n, y, xx, ch] = best
                        idx[n, y, xx, ch] = best_i
    return out_a, idx_a


def maxpool_backward(const double[:, :, :, ::1] dout, const cnp.int64_t[:, :, :, ::1] idx,
                     in_shape, Py_ssize_t ph, Py_ssize_t pw):
    dx_a = np.zeros(tuple(in_shape), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_a
    cdef Py_ssize_t b = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c = dout.shape[3]
    cdef Py_ssize_t n, y, xx, ch, t
    with nogil:
        for n in range(b):
            for y in range(ho):
                for xx in range(wo):
                    for ch in range(c):
                        t = idx[n, y, xx, ch]
                        dx[n, y * ph + t // pw, xx * pw + t % pw, ch] = dout[n, y, xx, ch]
    return dx_a
