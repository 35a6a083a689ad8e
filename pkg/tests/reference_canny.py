"""Independently coded reference Canny used as the oracle in tests.

Same contract as the production implementation (luminance weights, Gaussian
radius ceil(3 sigma) with edge-clamp padding, Sobel kernels, 4-direction NMS
with the >=positive / >negative tie-break, fractional double thresholds,
8-connected hysteresis) but written as plain per-pixel loops with an
explicit BFS, sharing no code with the vectorized version.
"""

import math
from collections import deque

import numpy as np


def _clamp(v, lo, hi):
    return lo if v < lo else hi if v > hi else v


def reference_canny(img, sigma=1.4, low=0.1, high=0.2):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        gray = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
    else:
        gray = img.copy()
    h, w = gray.shape

    radius = int(math.ceil(3.0 * sigma))
    kern = [math.exp(-0.5 * (x / sigma) ** 2) for x in range(-radius, radius + 1)]
    ksum = sum(kern)
    kern = [k / ksum for k in kern]

    tmp = np.zeros_like(gray)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k, kv in enumerate(kern):
                jj = _clamp(j + k - radius, 0, w - 1)
                acc += kv * gray[i, jj]
            tmp[i, j] = acc
    smooth = np.zeros_like(gray)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k, kv in enumerate(kern):
                ii = _clamp(i + k - radius, 0, h - 1)
                acc += kv * tmp[ii, j]
            smooth[i, j] = acc

    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for i in range(h):
        for j in range(w):
            sx = sy = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    v = smooth[_clamp(i + di, 0, h - 1), _clamp(j + dj, 0, w - 1)]
                    sx += kx[di + 1][dj + 1] * v
                    sy += ky[di + 1][dj + 1] * v
            gx[i, j] = sx
            gy[i, j] = sy

    mag = np.hypot(gx, gy)
    max_mag = mag.max()
    if max_mag <= 1e-12:
        return np.zeros_like(mag)

    nms = np.zeros_like(mag)
    for i in range(h):
        for j in range(w):
            ang = math.degrees(math.atan2(gy[i, j], gx[i, j])) % 180.0
            if ang < 22.5 or ang >= 157.5:
                di, dj = 0, 1
            elif ang < 67.5:
                di, dj = 1, 1
            elif ang < 112.5:
                di, dj = 1, 0
            else:
                di, dj = 1, -1
            pi, pj = i + di, j + dj
            ni, nj = i - di, j - dj
            pos = mag[pi, pj] if 0 <= pi < h and 0 <= pj < w else 0.0
            neg = mag[ni, nj] if 0 <= ni < h and 0 <= nj < w else 0.0
            if mag[i, j] >= pos and mag[i, j] > neg:
                nms[i, j] = mag[i, j]

    high_thr = high * max_mag
    low_thr = low * max_mag
    out = np.zeros((h, w))
    queue = deque()
    for i in range(h):
        for j in range(w):
            if nms[i, j] >= high_thr:
                out[i, j] = 1.0
                queue.append((i, j))
    while queue:
        i, j = queue.popleft()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ii, jj = i + di, j + dj
                if 0 <= ii < h and 0 <= jj < w and out[ii, jj] == 0.0:
                    if nms[ii, jj] >= low_thr:
                        out[ii, jj] = 1.0
                        queue.append((ii, jj))
    return out
