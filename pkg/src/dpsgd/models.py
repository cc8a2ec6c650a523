"""Desk-scale model zoo: logistic regression, MLPs and the simpleVGG family.

simpleVGG strings look like ``32(2)-64(2)-128(2)-128``: three blocks of two
3x3 convolutions with 32, 64 and 128 channels, then a 128-wide fully
connected layer, then the class logits. Blocks and the fully connected layer
are joined by 2x2 max-pooling (one pool after every block). Convolutions use
stride 1 and padding 1. There is no batch normalisation anywhere; group
norm after each convolution is optional.

Freezing works on block groups: group ``k`` is block ``k`` (the first
convolution of block 1 doubles as the input stem), the fully connected
layer is the last group, and the logits layer is never frozen.
"""

import json
import re
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from dpsgd import autodiff as ad
from dpsgd import tensor as T


class ArchSpecError(ValueError):
    def __init__(self, message, text, position):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.text = text
        self.position = position


@dataclass(frozen=True)
class ArchSpec:
    blocks: tuple  # ((channels, convs_per_block), ...)
    fc_width: int
    activation: str = "tanh"
    norm_groups: int = 0  # 0 = no normalisation

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("simpleVGG needs at least one block")
        for ch, n in self.blocks:
            if ch <= 0 or n <= 0:
                raise ValueError(f"block ({ch}, {n}) must have positive channels and conv count")
        if self.fc_width <= 0:
            raise ValueError("fc width must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def format(self):
        return "-".join(f"{c}({n})" for c, n in self.blocks) + f"-{self.fc_width}"

    def __str__(self):
        return self.format()


_INT = re.compile(r"[0-9]+")


def parse_arch_spec(text, activation="tanh", norm_groups=0):
    """Parse ``block ('-' block)* '-' INT`` where ``block := INT '(' INT ')'``."""
    pos = 0

    def integer():
        nonlocal pos
        m = _INT.match(text, pos)
        if not m:
            raise ArchSpecError("expected an integer", text, pos)
        pos = m.end()
        value = int(m.group())
        if value <= 0:
            raise ArchSpecError("expected a positive integer", text, m.start())
        return value

    def expect(ch):
        nonlocal pos
        if pos >= len(text) or text[pos] != ch:
            found = repr(text[pos]) if pos < len(text) else "end of input"
            raise ArchSpecError(f"expected {ch!r}, found {found}", text, pos)
        pos += 1

    blocks = []
    while True:
        n = integer()
        if pos < len(text) and text[pos] == "(":
            pos += 1
            convs = integer()
            expect(")")
            blocks.append((n, convs))
            expect("-")
            continue
        if not blocks:
            raise ArchSpecError("expected at least one block before the fc width", text, pos)
        if pos != len(text):
            raise ArchSpecError("trailing characters", text, pos)
        return ArchSpec(tuple(blocks), n, activation, norm_groups)


ACTIVATIONS = {"tanh": ad.Tanh, "relu": ad.ReLU}


@dataclass(frozen=True)
class FreezePlan:
    frozen_prefix: int = 0


@dataclass
class Model:
    """A chain of layer ops plus its parameters.

    ``groups`` lists the parameter names of each freezable block group in
    order; ``head`` names the logits layer.
    """

    name: str
    layers: list
    params: ad.ParamTree
    groups: list
    head: list
    input_shape: tuple
    num_classes: int
    seed: int = 0
    head_init: dict = field(default_factory=dict)
    activation: str = "tanh"
    norm_groups: int = 0

    def logits(self, x, params=None, batch_size=1024):
        params = self.params if params is None else params
        x = T.as_tensor(x, dtype=ad._dtype_of(params))
        outs = []
        for s in range(0, x.shape[0], batch_size):
            h = x[s:s + batch_size]
            for op in self.layers:
                h, _ = op.forward(h, params)
            outs.append(h)
        if not outs:
            return np.zeros((0, self.num_classes))
        return np.concatenate(outs)

    def predict(self, x, params=None):
        return self.logits(x, params).argmax(axis=1)

    def accuracy(self, x, y, params=None):
        if len(y) == 0:
            return float("nan")
        return float(np.mean(self.predict(x, params) == np.asarray(y)))

    def with_params(self, params):
        return replace(self, params=params)


def _uniform_fan_in(rng, shape, fan_in, dtype):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Builder:
    def __init__(self, seed, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params = ad.ParamTree()
        self.layers = []

    def dense(self, name, n_in, n_out):
        self.params.add(f"{name}.w", _uniform_fan_in(self.rng, (n_in, n_out), n_in, self.dtype))
        self.params.add(f"{name}.b", np.zeros(n_out, dtype=self.dtype))
        self.layers.append(ad.Dense(f"{name}.w", f"{name}.b"))
        return [f"{name}.w", f"{name}.b"]

    def conv(self, name, c_in, c_out, k=3):
        fan_in = c_in * k * k
        self.params.add(f"{name}.w", _uniform_fan_in(self.rng, (c_out, c_in, k, k), fan_in, self.dtype))
        self.params.add(f"{name}.b", np.zeros(c_out, dtype=self.dtype))
        self.layers.append(ad.Conv2d(f"{name}.w", f"{name}.b", stride=1, padding=k // 2))
        return [f"{name}.w", f"{name}.b"]

    def group_norm(self, name, channels, groups):
        self.params.add(f"{name}.gamma", np.ones(channels, dtype=self.dtype))
        self.params.add(f"{name}.beta", np.zeros(channels, dtype=self.dtype))
        self.layers.append(ad.GroupNorm(f"{name}.gamma", f"{name}.beta", groups))
        return [f"{name}.gamma", f"{name}.beta"]


def build_model(spec, input_shape, num_classes, seed=0, dtype=T.DEFAULT_DTYPE):
    """simpleVGG from an :class:`ArchSpec` (or its string form)."""
    if isinstance(spec, str):
        spec = parse_arch_spec(spec)
    c, h, w = input_shape
    bld = _Builder(seed, dtype)
    act = ACTIVATIONS[spec.activation]
    groups = []
    for bi, (channels, convs) in enumerate(spec.blocks, start=1):
        if h < 2 or w < 2:
            raise T.ShapeError(f"block {bi} ({channels}({convs})): input collapsed to {h}x{w} before pooling")
        names = []
        for ci in range(1, convs + 1):
            names += bld.conv(f"block{bi}.conv{ci}", c, channels)
            if spec.norm_groups:
                if channels % spec.norm_groups:
                    raise ValueError(f"block {bi}: {channels} channels not divisible by {spec.norm_groups} groups")
                names += bld.group_norm(f"block{bi}.gn{ci}", channels, spec.norm_groups)
            bld.layers.append(act())
            c = channels
        bld.layers.append(ad.MaxPool2d(2))
        h, w = h // 2, w // 2
        groups.append(names)
    bld.layers.append(ad.Flatten())
    groups.append(bld.dense("fc", c * h * w, spec.fc_width))
    bld.layers.append(act())
    head = bld.dense("head", spec.fc_width, num_classes)
    return Model(
        name=f"simplevgg:{spec.format()}",
        layers=bld.layers,
        params=bld.params,
        groups=groups,
        head=head,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        seed=seed,
        head_init={"n_in": spec.fc_width},
        activation=spec.activation,
        norm_groups=spec.norm_groups,
    )


def mlp(input_shape, num_classes, hidden=(), activation="tanh", seed=0, dtype=T.DEFAULT_DTYPE):
    """Fully connected net; ``hidden=()`` is multinomial logistic regression."""
    bld = _Builder(seed, dtype)
    act = ACTIVATIONS[activation]
    n_in = int(np.prod(input_shape))
    if len(input_shape) > 1:
        bld.layers.append(ad.Flatten())
    groups = []
    for i, width in enumerate(hidden, start=1):
        groups.append(bld.dense(f"hidden{i}", n_in, width))
        bld.layers.append(act())
        n_in = width
    head = bld.dense("head", n_in, num_classes)
    name = "logreg" if not hidden else "mlp:" + ",".join(str(h) for h in hidden)
    return Model(name, bld.layers, bld.params, groups, head, tuple(input_shape), num_classes, seed, {"n_in": n_in},
                 activation=activation)


def logistic_regression(input_shape, num_classes, seed=0, dtype=T.DEFAULT_DTYPE):
    return mlp(input_shape, num_classes, (), seed=seed, dtype=dtype)


def model_from_name(name, input_shape, num_classes, activation="tanh", norm_groups=0, seed=0,
                    dtype=T.DEFAULT_DTYPE):
    """``logreg``, ``mlp:64,32`` or ``simplevgg:32(2)-64(2)-128(2)-128``."""
    kind, _, arg = name.partition(":")
    if kind == "logreg":
        return logistic_regression(input_shape, num_classes, seed, dtype)
    if kind == "mlp":
        hidden = tuple(int(h) for h in arg.split(",") if h.strip())
        return mlp(input_shape, num_classes, hidden, activation, seed, dtype)
    if kind == "simplevgg":
        spec = parse_arch_spec(arg, activation, norm_groups)
        return build_model(spec, input_shape, num_classes, seed, dtype)
    raise ValueError(f"unknown model {name!r}")


def max_freeze_prefix(model):
    return len(model.groups)


def apply_freeze(model, plan):
    """Copy of ``model`` whose first ``plan.frozen_prefix`` block groups are not trainable."""
    k = plan.frozen_prefix if isinstance(plan, FreezePlan) else int(plan)
    if not 0 <= k <= max_freeze_prefix(model):
        raise ValueError(f"frozen_prefix must be in [0, {max_freeze_prefix(model)}], got {k}")
    params = model.params.copy()
    frozen = {n for g in model.groups[:k] for n in g}
    for n in params.names():
        params.set_trainable(n, n not in frozen)
    return model.with_params(params)


def replace_head(model, num_classes=None, seed=0):
    """Strip the logits layer and put a freshly initialised one in its place.

    Every other tensor (and its trainable flag) is copied bit-exactly.
    """
    num_classes = model.num_classes if num_classes is None else num_classes
    n_in = model.head_init["n_in"]
    w_name, b_name = model.head
    dtype = model.params[w_name].dtype.type
    rng = np.random.default_rng(seed)
    params = ad.ParamTree()
    for n, v in model.params.items():
        if n == w_name:
            v = _uniform_fan_in(rng, (n_in, num_classes), n_in, dtype)
        elif n == b_name:
            v = np.zeros(num_classes, dtype=dtype)
        else:
            v = v.copy()
        params.add(n, v, True if n in model.head else model.params.is_trainable(n))
    return replace(model, params=params, num_classes=num_classes)


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, raw little-endian payload

CHECKPOINT_MAGIC = b"DPSGDCK1"


def save_checkpoint(path, params, meta=None):
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "trainable": params.is_trainable(name),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": 1, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path):
    """Returns ``(ParamTree, meta)``."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a dpsgd checkpoint")
    if len(blob) < 16:
        raise ValueError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if len(blob) < 16 + hlen:
        raise ValueError(f"{path}: truncated header")
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    params = ad.ParamTree()
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"])
        params.add(e["name"], arr.astype(arr.dtype.newbyteorder("="), copy=True), e["trainable"])
    return params, header["meta"]


def save_model(path, model):
    meta = {
        "model": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "activation": model.activation,
        "norm_groups": model.norm_groups,
    }
    save_checkpoint(path, model.params, meta)


def load_model(path):
    params, meta = load_checkpoint(path)
    model = model_from_name(meta["model"], tuple(meta["input_shape"]), meta["num_classes"],
                            meta.get("activation", "tanh"), meta.get("norm_groups", 0))
    for n in model.params.names():
        model.params[n] = params[n]
        model.params.set_trainable(n, params.is_trainable(n))
    return model
