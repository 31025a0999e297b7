# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``gmparse._pykernels`` (same signatures)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, M_PI

cnp.import_array()

ctypedef fused real_t:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t j, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # smallest ox with ox * stride + j - pad >= 0
    cdef Py_ssize_t d = pad - j
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t j, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t w,
                                  Py_ssize_t wo) nogil:
    # one past the largest ox with ox * stride + j - pad <= w - 1
    cdef Py_ssize_t d = w - 1 + pad - j
    if d < 0:
        return 0
    d = d // stride + 1
    return d if d < wo else wo


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    if x.dtype == np.float32:
        return _im2col[float](x, kh, kw, stride, pad)
    return _im2col[double](np.asarray(x, dtype=np.float64), kh, kw, stride, pad)


cdef _im2col(const real_t[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros((n, c * kh * kw, ho * wo), dtype=dtype)  # padding taps stay zero
    cdef real_t[:, :, ::1] o = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, row, lo, hi, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        lo = _first_valid(j, pad, stride)
                        hi = _end_valid(j, pad, stride, w, wo)
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = oy * wo
                            for ox in range(lo, hi):
                                o[b, row, base + ox] = x[b, ch, iy, ox * stride + j - pad]
    return out


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    n, c, h, w = shape
    cols = np.ascontiguousarray(cols).reshape(n, c * kh * kw, -1)
    if cols.dtype == np.float32:
        return _col2im[float](cols, n, c, h, w, kh, kw, stride, pad)
    return _col2im[double](np.asarray(cols, dtype=np.float64), n, c, h, w,
                           kh, kw, stride, pad)


cdef _col2im(const real_t[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
             Py_ssize_t w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real_t[:, :, :, ::1] o = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, row, lo, hi, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        lo = _first_valid(j, pad, stride)
                        hi = _end_valid(j, pad, stride, w, wo)
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = oy * wo
                            for ox in range(lo, hi):
                                o[b, ch, iy, ox * stride + j - pad] += cols[b, row, base + ox]
    return out


def maxpool2d(x, int k):
    x = np.ascontiguousarray(x)
    if x.dtype == np.float32:
        return _maxpool[float](x, k)
    return _maxpool[double](np.asarray(x, dtype=np.float64), k)


cdef _maxpool(const real_t[:, :, :, ::1] x, int k):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // k, wo = x.shape[3] // k
    dtype = np.float32 if real_t is float else np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef real_t[:, :, :, ::1] o = out
    cdef long long[:, :, :, ::1] ix = idx
    cdef Py_ssize_t b, ch, oy, ox, i, j
    cdef real_t best, v
    cdef long long arg
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = x[b, ch, oy * k, ox * k]
                        arg = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, oy * k + i, ox * k + j]
                                if v > best:
                                    best = v
                                    arg = i * k + j
                        o[b, ch, oy, ox] = best
                        ix[b, ch, oy, ox] = arg
    return out, idx


def maxpool2d_backward(grad, idx, shape, int k):
    grad = np.ascontiguousarray(grad)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if grad.dtype == np.float32:
        return _maxpool_bwd[float](grad, idx, shape, k)
    return _maxpool_bwd[double](np.asarray(grad, dtype=np.float64), idx, shape, k)


cdef _maxpool_bwd(const real_t[:, :, :, ::1] g, const long long[:, :, :, ::1] idx, shape, int k):
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros(shape, dtype=dtype)
    cdef real_t[:, :, :, ::1] o = out
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t b, ch, oy, ox
    cdef long long a
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        a = idx[b, ch, oy, ox]
                        o[b, ch, oy * k + a // k, ox * k + a % k] += g[b, ch, oy, ox]
    return out


def fft_last(x, inverse=False):
    x = np.asarray(x)
    shape = x.shape
    cdef Py_ssize_t n = shape[len(shape) - 1]
    buf = np.array(x, dtype=np.complex128, order="C").reshape(-1, n)
    _fft_rows(buf, -1.0 if not inverse else 1.0)
    return buf.reshape(shape)


cdef void _fft_rows(double complex[:, ::1] a, double sign) noexcept nogil:
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t r, i, j, bit, m, start, t
    cdef double complex tmp, w, u, v, wm
    cdef double ang
    for r in range(rows):
        j = 0
        for i in range(1, n):
            bit = n >> 1
            while j & bit:
                j ^= bit
                bit >>= 1
            j |= bit
            if i < j:
                tmp = a[r, i]
                a[r, i] = a[r, j]
                a[r, j] = tmp
        m = 1
        while m < n:
            for t in range(m):
                ang = sign * M_PI * t / m
                w = cos(ang) + 1j * sin(ang)
                start = 0
                while start < n:
                    u = a[r, start + t]
                    v = a[r, start + t + m] * w
                    a[r, start + t] = u + v
                    a[r, start + t + m] = u - v
                    start += 2 * m
            m *= 2
