"""Dense tensors and the forward kernels the models need.

A tensor is a C-contiguous ``numpy.ndarray``, batch-first and
channels-second (``B x C x H x W`` for images). Kernels are pure functions
and preserve the floating dtype of their inputs; float64 is the default,
float32 is available for speed.
"""

import numpy as np

from dpsgd.backend import kernels

Tensor = np.ndarray

DEFAULT_DTYPE = np.float64
GROUP_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


def resolve_dtype(name):
    """Map ``"float64"``/``"float32"`` (or a numpy dtype) to a numpy dtype."""
    dt = np.dtype(name)
    if dt not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {name!r}; use float64 or float32")
    return dt.type


def as_tensor(x, dtype=DEFAULT_DTYPE):
    return np.ascontiguousarray(x, dtype=dtype)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def scale(a, s):
    return a * s


def tanh(x):
    return np.tanh(x)


def relu(x):
    return np.maximum(x, 0)


def sum(x, axis=None):  # noqa: A001
    return np.sum(x, axis=axis)


def mean(x, axis=None):
    return np.mean(x, axis=axis)


def flatten(x):
    """Collapse every axis after the batch axis."""
    return x.reshape(x.shape[0], -1)


def conv_output_hw(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


def _check_conv(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels but kernel {w.shape} expects {w.shape[1]}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    oh, ow = conv_output_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: kernel {w.shape[2]}x{w.shape[3]} does not fit input {x.shape[2]}x{x.shape[3]} "
            f"with padding {padding}"
        )
    return oh, ow


def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold ``x`` into a ``B x (OH*OW) x (C*kh*kw)`` patch matrix."""
    return kernels.im2col(np.ascontiguousarray(x), kh, kw, stride, padding)


def col2im(cols, x_shape, kh, kw, stride=1, padding=0):
    return kernels.col2im(np.ascontiguousarray(cols), tuple(x_shape), kh, kw, stride, padding)


def conv2d(x, w, stride=1, padding=0, method="im2col"):
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (F,C,kh,kw), zero padded.

    ``method="im2col"`` unfolds patches and calls BLAS; ``method="direct"``
    runs the loop kernel. Both return the same values.
    """
    oh, ow = _check_conv(x, w, stride, padding)
    if method == "direct":
        return kernels.conv2d_direct(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, padding)
    if method != "im2col":
        raise ValueError(f"unknown conv2d method {method!r}")
    out, _ = conv2d_im2col(x, w, stride, padding)
    return out


def conv2d_im2col(x, w, stride=1, padding=0):
    """Like :func:`conv2d` but also returns the patch matrix for reuse in backward."""
    oh, ow = _check_conv(x, w, stride, padding)
    F, C, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ w.reshape(F, -1).T  # B, L, F
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(x.shape[0], F, oh, ow), cols


def max_pool2d(x, size=2, stride=None):
    """Max pooling over ``size x size`` windows; trailing rows/cols that do not fill a window are dropped."""
    stride = size if stride is None else stride
    out, _ = max_pool2d_with_argmax(x, size, stride)
    return out


def max_pool2d_with_argmax(x, size=2, stride=None):
    stride = size if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-d input, got {x.shape}")
    if x.shape[2] < size or x.shape[3] < size:
        raise ShapeError(f"max_pool2d: window {size} larger than input {x.shape[2]}x{x.shape[3]}")
    return kernels.max_pool2d(np.ascontiguousarray(x), size, stride)


def group_norm(x, num_groups, gamma, beta, eps=GROUP_NORM_EPS):
    out, _ = group_norm_stats(x, num_groups, gamma, beta, eps)
    return out


def group_norm_stats(x, num_groups, gamma, beta, eps=GROUP_NORM_EPS):
    """Group norm plus ``(x_hat, inv_std)`` for the backward rule.

    Statistics are taken per example over each channel group and the
    spatial axes, never across the batch.
    """
    B, C = x.shape[:2]
    if C % num_groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {num_groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xg = x.reshape(B, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((xg - mu) * inv_std).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = x_hat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (x_hat, inv_std)


def log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Per-example cross-entropy losses, shape ``(B,)``. No reduction."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {logits.shape[1]})")
    lsm = log_softmax(logits)
    return -lsm[np.arange(logits.shape[0]), labels]
