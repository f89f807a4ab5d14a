# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Same call signatures and semantics as :mod:`vgn._fallback`; the two are
checked against each other in ``tests/test_backends.py``.
"""
import numpy as np

from libc.math cimport INFINITY, sqrt
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

ctypedef unsigned char u8


# row-major wrappers around column-major dgemm

cdef void _gemm_nn(int m, int n, int k, double* a, double* b, double* c,
                   double beta) noexcept nogil:
    # c[m,n] = a[m,k] @ b[k,n] + beta * c
    cdef char nt = b'N'
    cdef double one = 1.0
    dgemm(&nt, &nt, &n, &m, &k, &one, b, &n, a, &k, &beta, c, &n)


cdef void _gemm_tn(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # c[m,n] = a[k,m].T @ b[k,n]
    cdef char nt = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0, zero = 0.0
    dgemm(&nt, &tt, &n, &m, &k, &one, b, &n, a, &m, &zero, c, &n)


cdef void _gemm_nt(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # c[m,n] = a[m,k] @ b[n,k].T
    cdef char nt = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0, zero = 0.0
    dgemm(&tt, &nt, &n, &m, &k, &one, b, &k, a, &k, &zero, c, &n)


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] cols, Py_ssize_t k,
                  Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t ho,
                  Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], c = x.shape[2]
    cdef Py_ssize_t oy, ox, ky, kx, iy, ix, row, base
    for oy in range(ho):
        for ox in range(wo):
            row = oy * wo + ox
            for ky in range(k):
                iy = oy * stride + ky - pad
                for kx in range(k):
                    ix = ox * stride + kx - pad
                    base = (ky * k + kx) * c
                    if 0 <= iy < h and 0 <= ix < w:
                        memcpy(&cols[row, base], &x[iy, ix, 0], c * sizeof(double))
                    else:
                        memset(&cols[row, base], 0, c * sizeof(double))


def conv2d_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t h = x.shape[0], wd = x.shape[1], cin = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], cout = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - k) // stride + 1
    cdef Py_ssize_t m = ho * wo, kk = k * k * cin, i, j
    out = np.empty((ho, wo, cout), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    if m == 0 or cout == 0:
        return out
    cols = np.empty((m, kk), dtype=np.float64)
    cdef double[:, ::1] cv = cols
    with nogil:
        _im2col(x, cv, k, stride, pad, ho, wo)
        for i in range(ho):
            for j in range(wo):
                memcpy(&ov[i, j, 0], &b[0], cout * sizeof(double))
        _gemm_nn(<int>m, <int>cout, <int>kk, &cv[0, 0], <double*>&w[0, 0, 0, 0],
                 &ov[0, 0, 0], 1.0)
    return out


def conv2d_backward(const double[:, :, ::1] dout, const double[:, :, ::1] x,
                    const double[:, :, :, ::1] w, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t h = x.shape[0], wd = x.shape[1], cin = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], cout = w.shape[3]
    cdef Py_ssize_t ho = dout.shape[0], wo = dout.shape[1]
    cdef Py_ssize_t m = ho * wo, kk = k * k * cin
    cdef Py_ssize_t oy, ox, ky, kx, iy, ix, row, base, ci, co
    dx = np.zeros((h, wd, cin), dtype=np.float64)
    dw = np.zeros((k, k, cin, cout), dtype=np.float64)
    db = np.zeros(cout, dtype=np.float64)
    if m == 0 or cout == 0:
        return dx, dw, db
    cdef double[:, :, ::1] dxv = dx
    cdef double[:, :, :, ::1] dwv = dw
    cdef double[::1] dbv = db
    cols = np.empty((m, kk), dtype=np.float64)
    dcols = np.empty((m, kk), dtype=np.float64)
    cdef double[:, ::1] cv = cols
    cdef double[:, ::1] dcv = dcols
    with nogil:
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    dbv[co] += dout[oy, ox, co]
        _im2col(x, cv, k, stride, pad, ho, wo)
        _gemm_tn(<int>kk, <int>cout, <int>m, &cv[0, 0], <double*>&dout[0, 0, 0],
                 &dwv[0, 0, 0, 0])
        _gemm_nt(<int>m, <int>kk, <int>cout, <double*>&dout[0, 0, 0],
                 <double*>&w[0, 0, 0, 0], &dcv[0, 0])
        for oy in range(ho):
            for ox in range(wo):
                row = oy * wo + ox
                for ky in range(k):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(k):
                        ix = ox * stride + kx - pad
                        if ix < 0 or ix >= wd:
                            continue
                        base = (ky * k + kx) * cin
                        for ci in range(cin):
                            dxv[iy, ix, ci] += dcv[row, base + ci]
    return dx, dw, db


cdef inline int _code(u8[:, ::1] img, Py_ssize_t r, Py_ssize_t c) noexcept nogil:
    # E=1 NE=2 N=4 NW=8 W=16 SW=32 S=64 SE=128 (image is zero-bordered)
    return (img[r, c + 1] | (img[r - 1, c + 1] << 1) | (img[r - 1, c] << 2)
            | (img[r - 1, c - 1] << 3) | (img[r, c - 1] << 4)
            | (img[r + 1, c - 1] << 5) | (img[r + 1, c] << 6)
            | (img[r + 1, c + 1] << 7))


cdef Py_ssize_t _parallel_pass(u8[:, ::1] img, const u8[::1] lut,
                               u8[:, ::1] mark) noexcept nogil:
    cdef Py_ssize_t r, c, n = 0
    cdef Py_ssize_t h = img.shape[0] - 1, w = img.shape[1] - 1
    for r in range(1, h):
        for c in range(1, w):
            if img[r, c] and lut[_code(img, r, c)]:
                mark[r, c] = 1
                n += 1
    if n:
        for r in range(1, h):
            for c in range(1, w):
                if mark[r, c]:
                    img[r, c] = 0
                    mark[r, c] = 0
    return n


def thin(const u8[:, ::1] mask, const u8[::1] lut_a, const u8[::1] lut_b,
         const u8[::1] lut_clean):
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1], r, c, n, removed
    padded = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = np.asarray(mask) != 0
    mark_arr = np.zeros_like(padded)
    cdef u8[:, ::1] img = padded
    cdef u8[:, ::1] mark = mark_arr
    with nogil:
        while True:
            while True:
                n = _parallel_pass(img, lut_a, mark)
                n += _parallel_pass(img, lut_b, mark)
                if n == 0:
                    break
            removed = 0
            for r in range(1, h + 1):
                for c in range(1, w + 1):
                    if img[r, c] and lut_clean[_code(img, r, c)]:
                        img[r, c] = 0
                        removed += 1
            if removed == 0:
                break
    return padded[1:-1, 1:-1].copy()


# binary min-heap keyed on distance, with lazy deletion

cdef struct Heap:
    double* key
    Py_ssize_t* val
    Py_ssize_t size


cdef void _push(Heap* hp, double key, Py_ssize_t val) noexcept nogil:
    cdef Py_ssize_t i = hp.size, parent
    hp.size += 1
    while i > 0:
        parent = (i - 1) >> 1
        if hp.key[parent] <= key:
            break
        hp.key[i] = hp.key[parent]
        hp.val[i] = hp.val[parent]
        i = parent
    hp.key[i] = key
    hp.val[i] = val


cdef void _pop(Heap* hp, double* key, Py_ssize_t* val) noexcept nogil:
    cdef Py_ssize_t i = 0, child, n
    cdef double lk
    cdef Py_ssize_t lv
    key[0] = hp.key[0]
    val[0] = hp.val[0]
    hp.size -= 1
    n = hp.size
    if n == 0:
        return
    lk = hp.key[n]
    lv = hp.val[n]
    while True:
        child = 2 * i + 1
        if child >= n:
            break
        if child + 1 < n and hp.key[child + 1] < hp.key[child]:
            child += 1
        if hp.key[child] >= lk:
            break
        hp.key[i] = hp.key[child]
        hp.val[i] = hp.val[child]
        i = child
    hp.key[i] = lk
    hp.val[i] = lv


def geodesic_distance(const double[:, ::1] prob, Py_ssize_t r0, Py_ssize_t c0,
                      double radius):
    cdef Py_ssize_t h = prob.shape[0], w = prob.shape[1]
    cdef Py_ssize_t cap = 8 * h * w + 1, idx, r, c, rr, cc, q, t
    cdef double d, nd, step
    cdef Py_ssize_t dr[8]
    cdef Py_ssize_t dc[8]
    cdef double dl[8]
    cdef double diag = sqrt(2.0)
    dr[:] = [-1, -1, -1, 0, 0, 1, 1, 1]
    dc[:] = [-1, 0, 1, -1, 1, -1, 0, 1]
    for t in range(8):
        dl[t] = diag if (dr[t] != 0 and dc[t] != 0) else 1.0
    out = np.full((h, w), np.inf, dtype=np.float64)
    cdef double[:, ::1] dist = out
    cdef Heap hp
    hp.key = <double*>malloc(cap * sizeof(double))
    hp.val = <Py_ssize_t*>malloc(cap * sizeof(Py_ssize_t))
    hp.size = 0
    if hp.key == NULL or hp.val == NULL:
        free(hp.key)
        free(hp.val)
        raise MemoryError()
    with nogil:
        dist[r0, c0] = 0.0
        _push(&hp, 0.0, r0 * w + c0)
        while hp.size > 0:
            _pop(&hp, &d, &idx)
            if d > radius:
                break
            r = idx // w
            c = idx - r * w
            if d > dist[r, c]:
                continue
            for t in range(8):
                rr = r + dr[t]
                cc = c + dc[t]
                if rr < 0 or rr >= h or cc < 0 or cc >= w:
                    continue
                step = (1.0 - prob[rr, cc]) * dl[t]
                nd = d + step
                if nd < dist[rr, cc]:
                    dist[rr, cc] = nd
                    _push(&hp, nd, rr * w + cc)
        for r in range(h):
            for c in range(w):
                if dist[r, c] > radius:
                    dist[r, c] = INFINITY
    free(hp.key)
    free(hp.val)
    return out
