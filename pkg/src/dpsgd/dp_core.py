"""DP-SGD: per-example clipping, sharded Gaussian noise, virtual steps, Nesterov momentum.

One call to :func:`dp_sgd_step` is one noisy optimizer step. It may cover
several sub-batches (virtual steps); their clipped gradient sums are
accumulated before noise is added once. The noised sum is divided by the
effective batch size ``batch_size * virtual_steps`` so learning rates stay
comparable across batch sizes.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from dpsgd import autodiff as AD

GRAD_PATHS = ("fast", "materialize", "loop")
WEIGHT_DECAY_MODES = ("post_clip", "in_loss")
SCHEDULES = ("cosine", "constant")


@dataclass
class DpSgdConfig:
    clip_norm: float = 1.0  # None turns clipping off (non-private only)
    noise_multiplier: float = 0.0
    shards: int = 1
    batch_size: int = 256
    virtual_steps: int = 1
    max_lr: float = 0.1
    warmup_epochs: float = 0.0
    epochs: float = 1.0
    steps_per_epoch: int = 1
    schedule: str = "cosine"
    momentum: float = 0.0
    weight_decay: float = 0.0
    weight_decay_mode: str = "post_clip"
    seed: int = 0
    grad_path: str = "fast"

    def __post_init__(self):
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive (or None to disable), got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ValueError(f"noise_multiplier must be non-negative, got {self.noise_multiplier}")
        if self.clip_norm is None and self.noise_multiplier > 0:
            raise ValueError("noise is calibrated to the clip norm; cannot add noise with clipping off")
        for name in ("shards", "batch_size", "virtual_steps", "steps_per_epoch"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.weight_decay_mode not in WEIGHT_DECAY_MODES:
            raise ValueError(f"weight_decay_mode must be one of {WEIGHT_DECAY_MODES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.grad_path not in GRAD_PATHS:
            raise ValueError(f"grad_path must be one of {GRAD_PATHS}")
        if self.max_lr < 0 or self.warmup_epochs < 0 or self.epochs <= 0:
            raise ValueError("max_lr and warmup_epochs must be non-negative and epochs positive")

    @property
    def effective_batch(self):
        return self.batch_size * self.virtual_steps

    @property
    def total_steps(self):
        return max(1, int(round(self.epochs * self.steps_per_epoch)))

    @property
    def warmup_steps(self):
        return min(self.total_steps, int(round(self.warmup_epochs * self.steps_per_epoch)))

    @property
    def private(self):
        return self.clip_norm is not None and self.noise_multiplier > 0

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    momentum: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, params):
        return cls({n: np.zeros_like(params[n]) for n in params.trainable_names()}, 0)

    def copy(self):
        return OptimizerState({n: v.copy() for n, v in self.momentum.items()}, self.step)


def lr_at(t, cfg):
    """Linear warmup to ``max_lr`` then cosine decay to zero (or flat for ``constant``)."""
    T_s, W_s = cfg.total_steps, cfg.warmup_steps
    if not 0 <= t <= T_s:
        raise ValueError(f"step {t} outside [0, {T_s}]")
    if t < W_s:
        return cfg.max_lr * t / W_s
    if cfg.schedule == "constant" or T_s == W_s:
        return cfg.max_lr
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * (t - W_s) / (T_s - W_s)))


def clip(v, C):
    """Scale a gradient tree by ``min(1, C / ||v||)`` over all its entries."""
    if not C > 0:
        raise ValueError(f"clip norm must be positive, got {C}")
    norm = AD.tree_norm(v)
    return AD.tree_scale(v, min(1.0, C / norm) if norm > 0 else 1.0)


def clip_weights(norms, C):
    norms = np.asarray(norms)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, np.minimum(1.0, C / safe), 1.0)


def _decay_tree(params, names, lam):
    return AD.grad_tree(names, [lam * params[n] for n in names])


def clipped_grad_sum(graph, C, weight_decay=0.0):
    """Sum over the batch of clipped per-example gradients (two backward passes).

    With ``weight_decay`` each example's gradient includes ``weight_decay * theta``
    before clipping. Returns ``(sum_tree, norms)``.
    """
    norms = np.sqrt(AD.per_example_sq_norms(graph, weight_decay))
    w = clip_weights(norms, C)
    g = AD.weighted_backward(graph, w)
    if weight_decay:
        names = g.names()
        g = AD.tree_add(g, _decay_tree(graph.params, names, weight_decay * float(w.sum())))
    return g, norms


def _clip_and_sum(trees, C, params, weight_decay):
    names = params.trainable_names()
    acc = [np.zeros_like(params[n]) for n in names]
    norms = np.zeros(len(trees))
    for i, t in enumerate(trees):
        if weight_decay:
            t = AD.tree_add(t, _decay_tree(params, t.names(), weight_decay))
        norms[i] = AD.tree_norm(t)
        if C is not None:
            t = clip(t, C)
        for k, n in enumerate(names):
            acc[k] += t[n]
    return AD.grad_tree(names, acc), norms


def batch_gradient_sum(model, params, x, y, cfg):
    """Clipped (or raw, if clipping is off) gradient sum of one sub-batch via ``cfg.grad_path``."""
    lam = cfg.weight_decay if cfg.weight_decay_mode == "in_loss" else 0.0
    if len(y) == 0:
        return AD.zeros_like_trainable(params), np.zeros(0)
    if cfg.grad_path == "loop":
        return _clip_and_sum(AD.per_example_grads_loop(model, x, y, params), cfg.clip_norm, params, lam)
    _, graph = AD.forward_per_example(model, x, y, params)
    if cfg.grad_path == "materialize":
        return _clip_and_sum(AD.per_example_grads(graph), cfg.clip_norm, params, lam)
    if cfg.clip_norm is None:
        g = AD.weighted_backward(graph, np.ones(graph.batch_size))
        if lam:
            g = AD.tree_add(g, _decay_tree(params, g.names(), lam * graph.batch_size))
        return g, np.full(graph.batch_size, np.nan)  # norms not needed without clipping
    return clipped_grad_sum(graph, cfg.clip_norm, lam)


def shard_noise(names, shapes, dtype, std, seed, step, shard):
    """Standard-normal draw for one shard, keyed by (seed, step, shard), scaled by ``std``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step, shard])))
    size = sum(int(np.prod(s)) for s in shapes)
    flat = rng.standard_normal(size) * std
    out, off = [], 0
    for s in shapes:
        k = int(np.prod(s))
        out.append(flat[off:off + k].reshape(s).astype(dtype, copy=False))
        off += k
    return out


def add_noise(g, C, sigma, k=1, seed=0, step=0, parallel=False):
    """Add ``k`` independent shard draws of std ``(sigma / sqrt(k)) * C`` to every coordinate.

    The total per-coordinate std is ``sigma * C``. Shards are summed in a fixed
    order, so ``parallel=True`` gives the same bits as serial.
    """
    if sigma < 0 or k < 1:
        raise ValueError(f"need sigma >= 0 and k >= 1, got sigma={sigma}, k={k}")
    if sigma == 0:
        return g
    names = g.names()
    shapes = [g[n].shape for n in names]
    dtype = g[names[0]].dtype if names else np.float64
    std = sigma / math.sqrt(k) * C

    def draw(s):
        return shard_noise(names, shapes, dtype, std, seed, step, s)

    if parallel and k > 1:
        with ThreadPoolExecutor() as pool:
            draws = list(pool.map(draw, range(k)))
    else:
        draws = [draw(s) for s in range(k)]
    out = [g[n].copy() for n in names]
    for d in draws:
        for i in range(len(out)):
            out[i] += d[i]
    return AD.grad_tree(names, out)


def dp_sgd_step(state, model, params, batches, cfg, parallel=False):
    """One optimizer step over ``cfg.virtual_steps`` sub-batches.

    ``batches`` is a list of ``(x, y)``. Returns ``(new_params, new_state, info)``;
    frozen parameters are carried over untouched.
    """
    if len(batches) != cfg.virtual_steps:
        raise ValueError(f"expected {cfg.virtual_steps} sub-batches, got {len(batches)}")
    names = params.trainable_names()
    if set(state.momentum) != set(names):
        raise ValueError("optimizer state does not match the trainable parameters")
    g = AD.zeros_like_trainable(params)
    norms = []
    for x, y in batches:
        part, n = batch_gradient_sum(model, params, x, y, cfg)
        g = AD.tree_add(g, part)
        norms.append(n)
    norms = np.concatenate(norms) if norms else np.zeros(0)
    if cfg.private:
        g = add_noise(g, cfg.clip_norm, cfg.noise_multiplier, cfg.shards, cfg.seed, state.step, parallel)
    g = AD.tree_scale(g, 1.0 / cfg.effective_batch)
    if cfg.weight_decay and cfg.weight_decay_mode == "post_clip":
        g = AD.tree_add(g, _decay_tree(params, names, cfg.weight_decay))

    lr = lr_at(min(state.step, cfg.total_steps), cfg)
    mu = cfg.momentum
    new = AD.ParamTree()
    new_state = OptimizerState({}, state.step + 1)
    for n, theta in params.items():
        if not params.is_trainable(n):
            new.add(n, theta, False)
            continue
        v = mu * state.momentum[n] + g[n]
        new_state.momentum[n] = v
        new.add(n, theta - lr * (g[n] + mu * v))
    info = {
        "lr": lr,
        "examples": int(norms.size),
        "mean_grad_norm": float(np.nanmean(norms)) if norms.size and cfg.clip_norm else float("nan"),
        "clipped_fraction": float(np.mean(norms > cfg.clip_norm)) if norms.size and cfg.clip_norm else 0.0,
    }
    return new, new_state, info

