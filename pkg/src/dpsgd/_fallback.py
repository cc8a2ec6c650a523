"""Pure numpy versions of the compiled kernels in ``_ext.pyx``.

Same names, same signatures, same results (to rounding). Used when the
extension is not built or ``DPSGD_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

BACKEND = "python"

MAX_FRAC_TERMS = 100000


def _log_add(a, b):
    lo, hi = min(a, b), max(a, b)
    if lo == -math.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a, b):
    if b == -math.inf:
        return a
    if b >= a:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x):
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def log_a_int(q, sigma, alpha):
    """log A_alpha of the Poisson-subsampled Gaussian at an integer order."""
    alpha = int(alpha)
    i = np.arange(alpha + 1, dtype=np.float64)
    log_coef = special.gammaln(alpha + 1.0) - special.gammaln(i + 1.0) - special.gammaln(alpha - i + 1.0)
    terms = log_coef + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2.0 * sigma * sigma)
    return float(special.logsumexp(terms))


def log_a_frac(q, sigma, alpha):
    """log A_alpha at a fractional order; +inf if the series does not settle."""
    log_a0 = log_a1 = -math.inf
    last_s0 = last_s1 = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    lq, l1q = math.log(q), math.log1p(-q)
    s2 = 2.0 * sigma * sigma
    rs = math.sqrt(2.0) * sigma
    lga = float(special.gammaln(alpha + 1.0))
    for i in range(MAX_FRAC_TERMS):
        j = alpha - i
        log_coef = lga - math.lgamma(i + 1.0) - float(special.gammaln(j + 1.0))
        positive = i <= alpha or (i - math.floor(alpha) - 1) % 2 == 0
        s0 = log_coef + i * lq + j * l1q + (i * i - i) / s2 + math.log(0.5) + _log_erfc((i - z0) / rs)
        s1 = log_coef + j * lq + i * l1q + (j * j - j) / s2 + math.log(0.5) + _log_erfc((z0 - j) / rs)
        if positive:
            log_a0 = _log_add(log_a0, s0)
            log_a1 = _log_add(log_a1, s1)
        else:
            log_a0 = _log_sub(log_a0, s0)
            log_a1 = _log_sub(log_a1, s1)
        total = _log_add(log_a0, log_a1)
        if i > alpha and s0 < last_s0 and s1 < last_s1 and max(s0, s1) < total - 30.0:
            return total
        last_s0, last_s1 = s0, s1
    return math.inf


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def im2col(x, kh, kw, stride, padding):
    win = _windows(x, kh, kw, stride, padding)  # B, C, OH, OW, kh, kw
    B, C, OH, OW = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, OH * OW, C * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, padding):
    B, C, H, W = x_shape
    OH = (H + 2 * padding - kh) // stride + 1
    OW = (W + 2 * padding - kw) // stride + 1
    c6 = cols.reshape(B, OH, OW, C, kh, kw)
    out = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += c6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def conv2d_direct(x, w, stride, padding):
    # accumulate one kernel tap at a time; no column matrix
    F, C, kh, kw = w.shape
    B, _, H, W = x.shape
    OH = (H + 2 * padding - kh) // stride + 1
    OW = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((B, F, OH, OW), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride]
            out += np.einsum("bchw,fc->bfhw", patch, w[:, :, i, j])
    return out


def max_pool2d(x, size, stride):
    B, C, H, W = x.shape
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    OH, OW = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, OH, OW, size * size)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, size)
    rows = np.arange(OH)[:, None] * stride + di
    cols = np.arange(OW)[None, :] * stride + dj
    return np.ascontiguousarray(out), (rows * W + cols).astype(np.int64)


def max_pool2d_backward(g, arg, x_shape):
    B, C, H, W = x_shape
    dx = np.zeros((B * C, H * W), dtype=g.dtype)
    rows = np.repeat(np.arange(B * C), g.shape[2] * g.shape[3])
    np.add.at(dx, (rows, arg.reshape(-1)), g.reshape(-1))
    return dx.reshape(B, C, H, W)
