"""Reverse-mode differentiation with a per-example batch axis.

Models are chains of layer ops. A forward pass records a :class:`Graph`;
three backward entry points read it:

* :func:`per_example_grad_norms` - first pass, l2 norm of every example's
  gradient without materialising the per-example gradient set
* :func:`weighted_backward` - second pass, gradient of ``sum_i w_i * loss_i``
* :func:`per_example_grads` - materialises every example's gradient

Every op is row-independent (no statistic couples examples), so the
activation gradients flowing back carry one row per example, and each
parameter's gradient is a sum over rows of per-example contributions. The
per-parameter "factor" objects keep those contributions unreduced until the
caller decides what it needs.
"""

from dataclasses import dataclass, field

import numpy as np

from dpsgd import tensor as T


class ParamTree:
    """Ordered, named parameter tensors with per-parameter trainable flags."""

    def __init__(self, entries=()):
        self._values = {}
        self._trainable = {}
        for entry in entries:
            self.add(*entry)

    def add(self, name, value, trainable=True):
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._values[name] = np.asarray(value)
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        if name not in self._values:
            raise KeyError(name)
        if np.shape(value) != self._values[name].shape:
            raise T.ShapeError(f"{name}: cannot replace {self._values[name].shape} with {np.shape(value)}")
        self._values[name] = value

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        body = ", ".join(f"{n}{list(v.shape)}{'' if self._trainable[n] else '*'}" for n, v in self._values.items())
        return f"ParamTree({body})"

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def trainable_names(self):
        return [n for n in self._values if self._trainable[n]]

    def is_trainable(self, name):
        return self._trainable[name]

    def set_trainable(self, name, flag):
        if name not in self._values:
            raise KeyError(name)
        self._trainable[name] = bool(flag)

    def copy(self):
        out = ParamTree()
        for n, v in self._values.items():
            out.add(n, v.copy(), self._trainable[n])
        return out

    def num_params(self, trainable_only=False):
        names = self.trainable_names() if trainable_only else self.names()
        return int(sum(self._values[n].size for n in names))

    def flatten(self, trainable_only=True):
        names = self.trainable_names() if trainable_only else self.names()
        if not names:
            return np.zeros(0)
        return np.concatenate([self._values[n].ravel() for n in names])

    def unflatten(self, vector, trainable_only=True):
        """Inverse of :meth:`flatten`: a copy of this tree with values taken from ``vector``."""
        names = self.trainable_names() if trainable_only else self.names()
        vector = np.asarray(vector)
        if vector.size != sum(self._values[n].size for n in names):
            raise T.ShapeError(f"unflatten: vector of size {vector.size} does not match tree")
        out = self.copy()
        offset = 0
        for n in names:
            v = self._values[n]
            out._values[n] = vector[offset:offset + v.size].reshape(v.shape).astype(v.dtype, copy=True)
            offset += v.size
        return out


def grad_tree(names, arrays):
    return ParamTree((n, a, True) for n, a in zip(names, arrays))


def tree_norm(tree):
    return float(np.sqrt(sum(float(np.sum(v * v)) for _, v in tree.items())))


def tree_scale(tree, s):
    return ParamTree((n, v * s, tree.is_trainable(n)) for n, v in tree.items())


def tree_add(a, b):
    return ParamTree((n, v + b[n], a.is_trainable(n)) for n, v in a.items())


def zeros_like_trainable(params):
    return grad_tree(params.trainable_names(), [np.zeros_like(params[n]) for n in params.trainable_names()])


# ---------------------------------------------------------------------------
# vector-Jacobian products of the tensor kernels


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul_vjp(g, a, b):
    return g @ b.T, a.T @ g


def add_vjp(g, a_shape, b_shape):
    return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)


def mul_vjp(g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def scale_vjp(g, s):
    return g * s


def tanh_vjp(g, y):
    return g * (1.0 - y * y)


def relu_vjp(g, x):
    return g * (x > 0)


def sum_vjp(g, x_shape, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x_shape).copy()


def mean_vjp(g, x_shape, axis=None):
    n = np.prod(x_shape) if axis is None else np.prod([x_shape[a] for a in np.atleast_1d(axis)])
    return sum_vjp(g, x_shape, axis) / n


def flatten_vjp(g, x_shape):
    return g.reshape(x_shape)


def conv2d_vjp(g, cols, w, x_shape, stride, padding):
    """Gradients of conv2d w.r.t. input and kernel, from the forward patch matrix."""
    B, F = g.shape[:2]
    d = g.reshape(B, F, -1).transpose(0, 2, 1)  # B, L, F
    wm = w.reshape(F, -1)
    gx = T.col2im(d @ wm, x_shape, w.shape[2], w.shape[3], stride, padding)
    gw = (d.reshape(-1, F).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    return gx, gw


def max_pool2d_vjp(g, argmax, x_shape):
    from dpsgd.backend import kernels

    return kernels.max_pool2d_backward(np.ascontiguousarray(g), argmax, tuple(x_shape))


def group_norm_vjp(g, x_hat, inv_std, gamma, num_groups):
    """Returns ``(gx, per-example dgamma, per-example dbeta)``; the latter are ``B x C``."""
    B, C = g.shape[:2]
    bshape = (1, C) + (1,) * (g.ndim - 2)
    spatial = tuple(range(2, g.ndim))
    dgamma = (g * x_hat).sum(axis=spatial)
    dbeta = g.sum(axis=spatial)
    dxh = (g * gamma.reshape(bshape)).reshape(B, num_groups, -1)
    xh = x_hat.reshape(B, num_groups, -1)
    gx = inv_std * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
    return gx.reshape(g.shape), dgamma, dbeta


def softmax_cross_entropy_vjp(g, logits, labels):
    p = np.exp(T.log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1.0
    return p * g[:, None]


# ---------------------------------------------------------------------------
# per-parameter gradient factors


class OuterGrad:
    """Dense-weight gradient: example i contributes ``outer(a_i, d_i)``."""

    def __init__(self, a, d):
        self.a, self.d = a, d

    def total(self):
        return self.a.T @ self.d

    def per_example(self):
        return self.a[:, :, None] * self.d[:, None, :]

    def sq_norms(self):
        # ||outer(a, d)||_F = ||a|| * ||d||
        return np.einsum("bi,bi->b", self.a, self.a) * np.einsum("bo,bo->b", self.d, self.d)

    def dots(self, v):
        return np.einsum("bo,bo->b", self.a @ v, self.d)


class RowGrad:
    """Gradient already laid out with one row per example (biases, norm affines)."""

    def __init__(self, rows):
        self.rows = rows

    def total(self):
        return self.rows.sum(axis=0)

    def per_example(self):
        return self.rows

    def sq_norms(self):
        r = self.rows.reshape(self.rows.shape[0], -1)
        return np.einsum("bk,bk->b", r, r)

    def dots(self, v):
        return self.rows.reshape(self.rows.shape[0], -1) @ v.ravel()


class ConvGrad:
    """Conv-kernel gradient: example i contributes ``d_i^T cols_i`` (F x K)."""

    chunk = 64

    def __init__(self, cols, d, shape):
        self.cols, self.d, self.shape = cols, d, shape

    def total(self):
        F = self.d.shape[-1]
        return (self.d.reshape(-1, F).T @ self.cols.reshape(-1, self.cols.shape[-1])).reshape(self.shape)

    def per_example(self):
        return np.matmul(self.d.transpose(0, 2, 1), self.cols).reshape((-1,) + tuple(self.shape))

    def sq_norms(self):
        # materialise per layer, a chunk of examples at a time
        B = self.d.shape[0]
        out = np.empty(B, dtype=self.d.dtype)
        for s in range(0, B, self.chunk):
            pe = np.matmul(self.d[s:s + self.chunk].transpose(0, 2, 1), self.cols[s:s + self.chunk])
            out[s:s + self.chunk] = np.einsum("bfk,bfk->b", pe, pe)
        return out

    def dots(self, v):
        F = self.d.shape[-1]
        return np.einsum("blf,blf->b", self.cols @ v.reshape(F, -1).T, self.d)


# ---------------------------------------------------------------------------
# layer ops


class Dense:
    def __init__(self, weight, bias):
        self.param_names = (weight, bias)

    def forward(self, x, params):
        w, b = (params[n] for n in self.param_names)
        return T.matmul(x, w) + b, x

    def backward(self, x, g, params, want, need_input):
        w_name, b_name = self.param_names
        factors = {}
        if w_name in want:
            factors[w_name] = OuterGrad(x, g)
        if b_name in want:
            factors[b_name] = RowGrad(g)
        gx = g @ params[w_name].T if need_input else None
        return gx, factors


class Conv2d:
    def __init__(self, weight, bias, stride=1, padding=1):
        self.param_names = (weight, bias)
        self.stride, self.padding = stride, padding

    def forward(self, x, params):
        w, b = (params[n] for n in self.param_names)
        out, cols = T.conv2d_im2col(x, w, self.stride, self.padding)
        return out + b.reshape(1, -1, 1, 1), (cols, x.shape)

    def backward(self, ctx, g, params, want, need_input):
        cols, x_shape = ctx
        w_name, b_name = self.param_names
        w = params[w_name]
        B, F = g.shape[:2]
        d = g.reshape(B, F, -1).transpose(0, 2, 1)
        factors = {}
        if w_name in want:
            factors[w_name] = ConvGrad(cols, d, w.shape)
        if b_name in want:
            factors[b_name] = RowGrad(g.sum(axis=(2, 3)))
        gx = None
        if need_input:
            gx = T.col2im(d @ w.reshape(F, -1), x_shape, w.shape[2], w.shape[3], self.stride, self.padding)
        return gx, factors


class GroupNorm:
    def __init__(self, gamma, beta, num_groups, eps=T.GROUP_NORM_EPS):
        self.param_names = (gamma, beta)
        self.num_groups, self.eps = num_groups, eps

    def forward(self, x, params):
        gamma, beta = (params[n] for n in self.param_names)
        out, (x_hat, inv_std) = T.group_norm_stats(x, self.num_groups, gamma, beta, self.eps)
        return out, (x_hat, inv_std)

    def backward(self, ctx, g, params, want, need_input):
        x_hat, inv_std = ctx
        g_name, b_name = self.param_names
        gx, dgamma, dbeta = group_norm_vjp(g, x_hat, inv_std, params[g_name], self.num_groups)
        factors = {}
        if g_name in want:
            factors[g_name] = RowGrad(dgamma)
        if b_name in want:
            factors[b_name] = RowGrad(dbeta)
        return gx, factors


class _Stateless:
    param_names = ()


class Tanh(_Stateless):
    def forward(self, x, params):
        y = T.tanh(x)
        return y, y

    def backward(self, y, g, params, want, need_input):
        return tanh_vjp(g, y), {}


class ReLU(_Stateless):
    def forward(self, x, params):
        return T.relu(x), x

    def backward(self, x, g, params, want, need_input):
        return relu_vjp(g, x), {}


class MaxPool2d(_Stateless):
    def __init__(self, size=2):
        self.size = size

    def forward(self, x, params):
        out, arg = T.max_pool2d_with_argmax(x, self.size, self.size)
        return out, (arg, x.shape)

    def backward(self, ctx, g, params, want, need_input):
        arg, x_shape = ctx
        return max_pool2d_vjp(g, arg, x_shape), {}


class Flatten(_Stateless):
    def forward(self, x, params):
        return T.flatten(x), x.shape

    def backward(self, x_shape, g, params, want, need_input):
        return flatten_vjp(g, x_shape), {}


# ---------------------------------------------------------------------------
# graph and backward entry points


@dataclass(frozen=True)
class Graph:
    """Record of one forward evaluation: ops, their saved context, and the losses."""

    layers: tuple
    params: ParamTree
    inputs: np.ndarray
    labels: np.ndarray
    contexts: tuple
    logits: np.ndarray
    losses: np.ndarray
    trainable: frozenset = field(default_factory=frozenset)

    @property
    def batch_size(self):
        return self.losses.shape[0]

    def replay(self):
        """Re-run the recorded ops on the recorded input; returns ``(logits, losses)``."""
        h = self.inputs
        for op in self.layers:
            h, _ = op.forward(h, self.params)
        return h, T.softmax_cross_entropy(h, self.labels)


def forward_per_example(model, batch, labels, params=None):
    """Evaluate per-example losses and record the graph.

    ``model`` is anything with ``layers`` and ``params``; ``params`` overrides
    the model's own tree.
    """
    params = model.params if params is None else params
    x = T.as_tensor(batch, dtype=_dtype_of(params))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise T.ShapeError(f"batch of {x.shape[0]} examples but {labels.shape} labels")
    contexts = []
    h = x
    for op in model.layers:
        h, ctx = op.forward(h, params)
        contexts.append(ctx)
    losses = T.softmax_cross_entropy(h, labels)
    return losses, Graph(
        layers=tuple(model.layers),
        params=params,
        inputs=x,
        labels=labels,
        contexts=tuple(contexts),
        logits=h,
        losses=losses,
        trainable=frozenset(params.trainable_names()),
    )


def _dtype_of(params):
    for _, v in params.items():
        return v.dtype.type
    return T.DEFAULT_DTYPE


def _backprop(graph, seed, visit):
    """Walk the graph backwards from d(loss_i) = seed_i, handing each trainable factor to ``visit``."""
    first = next(
        (i for i, op in enumerate(graph.layers) if any(n in graph.trainable for n in op.param_names)),
        None,
    )
    if first is None or graph.batch_size == 0:
        return
    g = softmax_cross_entropy_vjp(np.asarray(seed, dtype=graph.logits.dtype), graph.logits, graph.labels)
    for idx in range(len(graph.layers) - 1, first - 1, -1):
        op = graph.layers[idx]
        want = [n for n in op.param_names if n in graph.trainable]
        g, factors = op.backward(graph.contexts[idx], g, graph.params, want, idx > first)
        for name in want:
            visit(name, factors[name])


def _ordered(graph):
    return [n for n in graph.params.names() if n in graph.trainable]


def weighted_backward(graph, weights):
    """Gradient of ``sum_i weights[i] * losses[i]`` w.r.t. trainable parameters."""
    weights = np.asarray(weights)
    if weights.shape != (graph.batch_size,):
        raise T.ShapeError(f"weights of shape {weights.shape} for a batch of {graph.batch_size}")
    grads = {}
    _backprop(graph, weights, lambda n, f: grads.__setitem__(n, f.total()))
    names = _ordered(graph)
    return grad_tree(names, [grads.get(n, np.zeros_like(graph.params[n])) for n in names])


def per_example_sq_norms(graph, weight_decay=0.0):
    """Squared l2 norm of each example's gradient, one layer at a time.

    With ``weight_decay`` the per-example gradient is taken to be
    ``grad_i + weight_decay * theta`` (the decay term living inside the loss).
    """
    B = graph.batch_size
    acc = np.zeros(B, dtype=graph.logits.dtype)

    def visit(name, factor):
        nonlocal acc
        acc = acc + factor.sq_norms()
        if weight_decay:
            theta = graph.params[name]
            acc = acc + 2.0 * weight_decay * factor.dots(theta) + weight_decay ** 2 * float(np.sum(theta * theta))

    _backprop(graph, np.ones(B), visit)
    return np.maximum(acc, 0.0)


def per_example_grad_norms(graph):
    return np.sqrt(per_example_sq_norms(graph))


def per_example_grads(graph):
    """Every example's gradient as its own tree (memory ``B x #params``)."""
    B = graph.batch_size
    rows = {}
    _backprop(graph, np.ones(B), lambda n, f: rows.__setitem__(n, f.per_example()))
    names = _ordered(graph)
    stacked = [rows.get(n, np.zeros((B,) + graph.params[n].shape, dtype=graph.logits.dtype)) for n in names]
    return [grad_tree(names, [s[i] for s in stacked]) for i in range(B)]


def per_example_grads_loop(model, batch, labels, params=None):
    """Naive per-example gradients: one forward/backward per example."""
    out = []
    for i in range(len(labels)):
        _, graph = forward_per_example(model, batch[i:i + 1], labels[i:i + 1], params)
        out.append(weighted_backward(graph, np.ones(1)))
    return out


def batch_grad(model, batch, labels, params=None):
    """Gradient of the summed loss (the plain non-private backward pass)."""
    _, graph = forward_per_example(model, batch, labels, params)
    return weighted_backward(graph, np.ones(graph.batch_size))
