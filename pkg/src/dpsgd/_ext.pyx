# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.

Mirrors :mod:`dpsgd._fallback` function for function; :mod:`dpsgd.backend`
picks whichever is importable.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log, log1p, lgamma, sqrt, fabs, INFINITY, floor
from scipy.special.cython_special cimport log_ndtr

cnp.import_array()

BACKEND = "compiled"

cdef int MAX_FRAC_TERMS = 100000
cdef double LOG_HALF = -0.6931471805599453
cdef double LOG_TWO = 0.6931471805599453
cdef double SQRT2 = 1.4142135623730951


cdef inline double _log_add(double a, double b) nogil:
    cdef double lo, hi
    if a < b:
        lo = a
        hi = b
    else:
        lo = b
        hi = a
    if lo == -INFINITY:
        return hi
    return hi + log1p(exp(lo - hi))


cdef inline double _log_sub(double a, double b) nogil:
    # log(exp(a) - exp(b)); a <= b only through rounding, treated as zero
    if b == -INFINITY:
        return a
    if b >= a:
        return -INFINITY
    return a + log1p(-exp(b - a))


cdef inline double _log_erfc(double x) nogil:
    return LOG_TWO + log_ndtr(-x * SQRT2)


cpdef double log_a_int(double q, double sigma, long alpha):
    """log A_alpha of the Poisson-subsampled Gaussian at an integer order."""
    cdef long i
    cdef double lq = log(q)
    cdef double l1q = log1p(-q)
    cdef double s2 = 2.0 * sigma * sigma
    cdef double lga = lgamma(alpha + 1.0)
    cdef double t, m = -INFINITY, acc = 0.0
    for i in range(alpha + 1):
        t = (lga - lgamma(i + 1.0) - lgamma(alpha - i + 1.0)
             + i * lq + (alpha - i) * l1q + (i * i - i) / s2)
        if t > m:
            m = t
    for i in range(alpha + 1):
        t = (lga - lgamma(i + 1.0) - lgamma(alpha - i + 1.0)
             + i * lq + (alpha - i) * l1q + (i * i - i) / s2)
        acc += exp(t - m)
    return m + log(acc)


cpdef double log_a_frac(double q, double sigma, double alpha):
    """log A_alpha at a fractional order via the two-sided erfc series.

    Returns +inf when the series fails to settle within MAX_FRAC_TERMS.
    """
    cdef double log_a0 = -INFINITY, log_a1 = -INFINITY
    cdef double last_s0 = -INFINITY, last_s1 = -INFINITY
    cdef double z0 = sigma * sigma * log(1.0 / q - 1.0) + 0.5
    cdef double lq = log(q)
    cdef double l1q = log1p(-q)
    cdef double s2 = 2.0 * sigma * sigma
    cdef double rs = SQRT2 * sigma
    cdef double lga = lgamma(alpha + 1.0)
    cdef double log_coef, j, s0, s1, total
    cdef int i, positive
    for i in range(MAX_FRAC_TERMS):
        j = alpha - i
        log_coef = lga - lgamma(i + 1.0) - lgamma(j + 1.0)
        # binom(alpha, i) < 0 when an odd number of factors (alpha - m) are negative
        positive = 1
        if i > alpha:
            positive = ((i - <int>floor(alpha) - 1) % 2) == 0
        s0 = (log_coef + i * lq + j * l1q + (i * i - i) / s2
              + LOG_HALF + _log_erfc((i - z0) / rs))
        s1 = (log_coef + j * lq + i * l1q + (j * j - j) / s2
              + LOG_HALF + _log_erfc((z0 - j) / rs))
        if positive:
            log_a0 = _log_add(log_a0, s0)
            log_a1 = _log_add(log_a1, s1)
        else:
            log_a0 = _log_sub(log_a0, s0)
            log_a1 = _log_sub(log_a1, s1)
        total = _log_add(log_a0, log_a1)
        if i > alpha and s0 < last_s0 and s1 < last_s1 and (s0 if s0 > s1 else s1) < total - 30.0:
            return total
        last_s0 = s0
        last_s1 = s1
    return INFINITY


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t K = C * kh * kw
    dtype = np.float64 if floating is double else np.float32
    cols_arr = np.zeros((B, OH * OW, K), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, hi, wi, k
    with nogil:
        for b in range(B):
            for oh in range(OH):
                for ow in range(OW):
                    k = 0
                    for c in range(C):
                        for i in range(kh):
                            hi = oh * stride + i - padding
                            for j in range(kw):
                                wi = ow * stride + j - padding
                                if 0 <= hi < H and 0 <= wi < W:
                                    cols[b, oh * OW + ow, k] = x[b, c, hi, wi]
                                k += 1
    return cols_arr


def col2im(floating[:, :, ::1] cols, tuple x_shape, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t OH = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * padding - kw) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, hi, wi, k
    with nogil:
        for b in range(B):
            for oh in range(OH):
                for ow in range(OW):
                    k = 0
                    for c in range(C):
                        for i in range(kh):
                            hi = oh * stride + i - padding
                            for j in range(kw):
                                wi = ow * stride + j - padding
                                if 0 <= hi < H and 0 <= wi < W:
                                    out[b, c, hi, wi] += cols[b, oh * OW + ow, k]
                                k += 1
    return out_arr


def conv2d_direct(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t OH = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * padding - kw) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((B, F, OH, OW), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, f, c, i, j, oh, ow, hi, wi
    cdef double acc
    with nogil:
        for b in range(B):
            for f in range(F):
                for oh in range(OH):
                    for ow in range(OW):
                        acc = 0.0
                        for c in range(C):
                            for i in range(kh):
                                hi = oh * stride + i - padding
                                if hi < 0 or hi >= H:
                                    continue
                                for j in range(kw):
                                    wi = ow * stride + j - padding
                                    if 0 <= wi < W:
                                        acc = acc + x[b, c, hi, wi] * w[f, c, i, j]
                        out[b, f, oh, ow] = acc
    return out_arr


def max_pool2d(floating[:, :, :, ::1] x, int size, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H - size) // stride + 1
    cdef Py_ssize_t OW = (W - size) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, C, OH, OW), dtype=dtype)
    arg_arr = np.empty((B, C, OH, OW), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, oh, ow, i, j, best
    cdef floating v, m
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(OH):
                    for ow in range(OW):
                        best = (oh * stride) * W + ow * stride
                        m = x[b, c, oh * stride, ow * stride]
                        for i in range(size):
                            for j in range(size):
                                v = x[b, c, oh * stride + i, ow * stride + j]
                                if v > m:
                                    m = v
                                    best = (oh * stride + i) * W + ow * stride + j
                        out[b, c, oh, ow] = m
                        arg[b, c, oh, ow] = best
    return out_arr, arg_arr


def max_pool2d_backward(floating[:, :, :, ::1] g, cnp.int64_t[:, :, :, ::1] arg, tuple x_shape):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t OH = g.shape[2], OW = g.shape[3]
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.zeros((B, C, H * W), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, oh, ow
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(OH):
                    for ow in range(OW):
                        dx[b, c, arg[b, c, oh, ow]] += g[b, c, oh, ow]
    return dx_arr.reshape(B, C, H, W)
