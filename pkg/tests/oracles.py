"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here calls into the package's kernels: loops, quadrature and
finite differences only.
"""

import math

import numpy as np
from scipy import integrate


def conv2d_loop(x, w, stride=1, padding=0):
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + H, padding:padding + W] = x
    OH = (H + 2 * padding - kh) // stride + 1
    OW = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, F, OH, OW), dtype=x.dtype)
    for b in range(B):
        for f in range(F):
            for i in range(OH):
                for j in range(OW):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, f, i, j] = np.sum(patch * w[f])
    return out


def max_pool_loop(x, size, stride):
    B, C, H, W = x.shape
    OH, OW = (H - size) // stride + 1, (W - size) // stride + 1
    out = np.empty((B, C, OH, OW), dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(OH):
                for j in range(OW):
                    out[b, c, i, j] = x[b, c, i * stride:i * stride + size, j * stride:j * stride + size].max()
    return out


def group_norm_loop(x, groups, gamma, beta, eps):
    out = np.empty_like(x)
    B, C = x.shape[:2]
    per = C // groups
    for b in range(B):
        for g in range(groups):
            block = x[b, g * per:(g + 1) * per]
            mu = block.mean()
            var = ((block - mu) ** 2).mean()
            for c in range(g * per, (g + 1) * per):
                out[b, c] = (x[b, c] - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def cross_entropy_loop(logits, labels):
    out = []
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        out.append(lse - row[y])
    return np.array(out)


def central_diff(f, x, h=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def subsampled_gaussian_rdp(q, sigma, alpha):
    """RDP of one Poisson-subsampled Gaussian step by numerical integration.

    ``A = E_{z ~ N(0, s^2)} [((1 - q) + q * exp((2z - 1) / (2 s^2)))^alpha]`` and
    RDP = ``log(A) / (alpha - 1)``.
    """
    s2 = sigma * sigma

    def log_integrand(z):
        log_ratio = math.log1p(q * math.expm1((2 * z - 1) / (2 * s2)))
        return -z * z / (2 * s2) + alpha * log_ratio - 0.5 * math.log(2 * math.pi * s2)

    # the mass sits near 0 and, for large alpha, near alpha (the shifted mode)
    lo, hi = -40 * sigma, alpha + 40 * sigma
    pts = sorted({0.0, 0.5, 1.0, float(alpha) / 2, float(alpha)})
    # factor out the peak so large orders do not overflow
    grid = np.linspace(lo, hi, 4001)
    peak = max(log_integrand(z) for z in grid)
    val, _ = integrate.quad(lambda z: math.exp(log_integrand(z) - peak), lo, hi, points=pts, limit=500,
                            epsabs=0, epsrel=1e-13)
    return (peak + math.log(val)) / (alpha - 1)


def q1_epsilon_scan(sigma, delta, orders):
    """Full-batch single step: min over orders of alpha/(2 sigma^2) + log(1/delta)/(alpha - 1)."""
    best = math.inf
    for a in orders:
        best = min(best, a / (2 * sigma * sigma) + math.log(1 / delta) / (a - 1))
    return best


def per_example_grads_fd(model, x, y, h=1e-6):
    """Finite-difference gradient of each example's loss w.r.t. every trainable tensor."""
    from dpsgd import autodiff as AD

    out = []
    for i in range(len(y)):
        grads = {}
        for name in model.params.trainable_names():
            def f(v, name=name):
                p = model.params.copy()
                p[name] = v
                losses, _ = AD.forward_per_example(model, x[i:i + 1], y[i:i + 1], p)
                return float(losses[0])
            grads[name] = central_diff(f, model.params[name], h)
        out.append(grads)
    return out
