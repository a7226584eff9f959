# cython: language_level=3
"""Compiled hot kernels: prioritized-replay sum tree and gaze target maps."""
import numpy as np
from libc.math cimport exp


def sumtree_update(double[::1] tree, Py_ssize_t leaf_offset, const long long[::1] idx, const double[::1] value):
    cdef Py_ssize_t n, k
    for n in range(idx.shape[0]):
        k = leaf_offset + idx[n]
        tree[k] = value[n]
        k //= 2
        while k >= 1:
            tree[k] = tree[2 * k] + tree[2 * k + 1]
            k //= 2


def sumtree_find(const double[::1] tree, Py_ssize_t leaf_offset, const double[::1] values, long long[::1] out):
    cdef Py_ssize_t n, k, left
    cdef double v
    for n in range(values.shape[0]):
        v = values[n]
        k = 1
        while k < leaf_offset:
            left = 2 * k
            if v < tree[left] or tree[left + 1] <= 0.0:
                k = left
            else:
                v -= tree[left]
                k = left + 1
        out[n] = k - leaf_offset


def cluster_gaze(const double[::1] x, const double[::1] y, const double[::1] t, double radius):
    cdef Py_ssize_t n = x.shape[0]
    cdef double[::1] cx = np.empty(n)
    cdef double[::1] cy = np.empty(n)
    cdef double[::1] ct = np.empty(n)
    cdef Py_ssize_t i, c, best, m = 0
    cdef double d, best_d, r2 = radius * radius
    for i in range(n):
        best = -1
        best_d = 1e300
        for c in range(m):
            d = (cx[c] - x[i]) ** 2 + (cy[c] - y[i]) ** 2
            if d <= r2 and d <= best_d:
                best = c
                best_d = d
        if best < 0:
            best = m
            m += 1
        cx[best] = x[i]
        cy[best] = y[i]
        ct[best] = t[i]
    return np.asarray(cx[:m]).copy(), np.asarray(cy[:m]).copy(), np.asarray(ct[:m]).copy()


cdef _ones_conv(double[:, ::1] a, int stride):
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1]
    cdef Py_ssize_t oh = (h - 1) // stride + 1, ow = (w - 1) // stride + 1
    cdef double[:, ::1] out = np.zeros((oh, ow))
    cdef Py_ssize_t i, j, yy, xx
    cdef int dy, dx
    cdef double s
    for i in range(oh):
        for j in range(ow):
            s = 0.0
            for dy in range(3):
                yy = i * stride + dy - 1
                if yy < 0 or yy >= h:
                    continue
                for dx in range(3):
                    xx = j * stride + dx - 1
                    if xx < 0 or xx >= w:
                        continue
                    s += a[yy, xx]
            out[i, j] = s
    return out


def gaze_target(fx, fy, weight, double sigma_x, double sigma_y, Py_ssize_t size):
    cdef const double[::1] px = np.ascontiguousarray(fx, dtype=np.float64)
    cdef const double[::1] py = np.ascontiguousarray(fy, dtype=np.float64)
    cdef const double[::1] pw = np.ascontiguousarray(weight, dtype=np.float64)
    cdef Py_ssize_t m = px.shape[0], k, i, j
    cdef double[:, ::1] gx = np.empty((m, size))
    cdef double[:, ::1] gy = np.empty((m, size))
    cdef double[:, ::1] pmap = np.zeros((size, size))
    cdef double d, row
    for k in range(m):
        for i in range(size):
            d = (i + 0.5 - px[k]) / sigma_x
            gx[k, i] = exp(-0.5 * d * d)
            d = (i + 0.5 - py[k]) / sigma_y
            gy[k, i] = pw[k] * exp(-0.5 * d * d)
    for i in range(size):
        for j in range(size):
            row = 0.0
            for k in range(m):
                row += gy[k, i] * gx[k, j]
            pmap[i, j] = row
    return np.asarray(_ones_conv(_ones_conv(_ones_conv(pmap, 2), 2), 1))
