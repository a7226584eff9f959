"""Pure-Python/numpy implementations of the hot kernels.

Mirrors ``_ckernels.pyx`` function by function; selected when the compiled
module is unavailable or ``CTRATTN_PURE_PYTHON=1``.
"""
from __future__ import annotations

import numpy as np


def sumtree_update(tree, leaf_offset, idx, value):
    for i, v in zip(idx, value):
        k = leaf_offset + int(i)
        tree[k] = v
        k //= 2
        while k >= 1:
            tree[k] = tree[2 * k] + tree[2 * k + 1]
            k //= 2


def sumtree_find(tree, leaf_offset, values, out):
    for n, v in enumerate(values):
        k = 1
        while k < leaf_offset:
            left = 2 * k
            # guard: never descend into an empty right subtree through rounding
            if v < tree[left] or tree[left + 1] <= 0.0:
                k = left
            else:
                v -= tree[left]
                k = left + 1
        out[n] = k - leaf_offset


def cluster_gaze(x, y, t, radius):
    cx: list[float] = []
    cy: list[float] = []
    ct: list[float] = []
    r2 = radius * radius
    for xi, yi, ti in zip(x, y, t):
        best = -1
        best_d = np.inf
        for c in range(len(cx)):
            d = (cx[c] - xi) ** 2 + (cy[c] - yi) ** 2
            if d <= r2 and d <= best_d:
                best, best_d = c, d
        if best < 0:
            cx.append(float(xi))
            cy.append(float(yi))
            ct.append(float(ti))
        else:
            cx[best], cy[best], ct[best] = float(xi), float(yi), float(ti)
    return np.asarray(cx), np.asarray(cy), np.asarray(ct)


def _ones_conv(a, stride):
    h, w = a.shape
    p = np.pad(a, 1)
    oh = (h - 1) // stride + 1
    ow = (w - 1) // stride + 1
    out = np.zeros((oh, ow))
    for dy in range(3):
        for dx in range(3):
            out += p[dy : dy + stride * (oh - 1) + 1 : stride, dx : dx + stride * (ow - 1) + 1 : stride]
    return out


def gaze_target(fx, fy, weight, sigma_x, sigma_y, size):
    centers = np.arange(size) + 0.5
    gx = np.exp(-0.5 * ((centers[None, :] - np.asarray(fx)[:, None]) / sigma_x) ** 2)
    gy = np.exp(-0.5 * ((centers[None, :] - np.asarray(fy)[:, None]) / sigma_y) ** 2)
    point_map = (np.asarray(weight)[:, None] * gy).T @ gx
    return _ones_conv(_ones_conv(_ones_conv(point_map, 2), 2), 1)
