"""Pure-Python/numpy twins of the compiled kernels in ``_kernels.pyx``."""
import heapq
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# bit weights of the 8-neighbourhood code: E NE N NW W SW S SE
_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def _im2col(x, k, stride, pad):
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    # (ho, wo, cin, ky, kx) -> rows ordered (ky, kx, cin) like the kernel
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, -1)
    return cols, ho, wo


def conv2d_forward(x, w, b, stride, pad):
    k, cout = w.shape[0], w.shape[3]
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(-1, cout) + b
    return out.reshape(ho, wo, cout)


def conv2d_backward(dout, x, w, stride, pad):
    h, wd, cin = x.shape
    k, cout = w.shape[0], w.shape[3]
    ho, wo = dout.shape[:2]
    cols, _, _ = _im2col(x, k, stride, pad)
    d2 = dout.reshape(ho * wo, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(ho, wo, k, k, cin)
    dxp = np.zeros((h + 2 * pad, wd + 2 * pad, cin))
    for ky in range(k):
        for kx in range(k):
            dxp[ky:ky + stride * (ho - 1) + 1:stride,
                kx:kx + stride * (wo - 1) + 1:stride] += dcols[:, :, ky, kx]
    return dxp[pad:pad + h, pad:pad + wd].copy(), dw, db


def _codes(img):
    h, w = img.shape[0] - 2, img.shape[1] - 2
    code = np.zeros((h, w), dtype=np.int64)
    for bit, (dr, dc) in enumerate(_OFFSETS):
        code |= img[1 + dr:1 + dr + h, 1 + dc:1 + dc + w].astype(np.int64) << bit
    return code


def _code_at(img, r, c):
    code = 0
    for bit, (dr, dc) in enumerate(_OFFSETS):
        code |= int(img[r + dr, c + dc]) << bit
    return code


def thin(mask, lut_a, lut_b, lut_clean):
    img = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=np.uint8)
    img[1:-1, 1:-1] = np.asarray(mask) != 0
    inner = img[1:-1, 1:-1]
    lut_a = np.asarray(lut_a, dtype=bool)
    lut_b = np.asarray(lut_b, dtype=bool)
    while True:
        while True:
            n = 0
            for lut in (lut_a, lut_b):
                kill = inner.astype(bool) & lut[_codes(img)]
                n += int(kill.sum())
                inner[kill] = 0
            if n == 0:
                break
        removed = 0
        for r, c in np.argwhere(inner) + 1:
            if img[r, c] and lut_clean[_code_at(img, r, c)]:
                img[r, c] = 0
                removed += 1
        if removed == 0:
            break
    return inner.copy()


def geodesic_distance(prob, r0, c0, radius):
    h, w = prob.shape
    dist = np.full((h, w), np.inf)
    dist[r0, c0] = 0.0
    diag = math.sqrt(2.0)
    heap = [(0.0, r0, c0)]
    while heap:
        d, r, c = heapq.heappop(heap)
        if d > radius:
            break
        if d > dist[r, c]:
            continue
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                rr, cc = r + dr, c + dc
                if rr < 0 or rr >= h or cc < 0 or cc >= w:
                    continue
                step = (1.0 - prob[rr, cc]) * (diag if dr and dc else 1.0)
                nd = d + step
                if nd < dist[rr, cc]:
                    dist[rr, cc] = nd
                    heapq.heappush(heap, (nd, rr, cc))
    dist[dist > radius] = np.inf
    return dist
