"""Datasets, bit-exact format readers, samplers and public/private splits.

Everything is held in memory. Readers accept raw or gzip-compressed files
and come with writers that reproduce the original bytes.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "DPSGD_DATA_ROOT"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class FormatError(ValueError):
    def __init__(self, message, path=None, offset=None):
        where = f"{path}: " if path else ""
        at = f" (offset {offset})" if offset is not None else ""
        super().__init__(f"{where}{message}{at}")
        self.path = path
        self.offset = offset


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    name: str
    num_classes: int
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{self.name}: {len(self.x)} examples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], name or self.name, self.num_classes, dict(self.normalization))

    def astype(self, dtype):
        return Dataset(self.x.astype(dtype), self.y, self.name, self.num_classes, dict(self.normalization))


def data_root():
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


# ---------------------------------------------------------------------------
# MNIST IDX


def parse_idx(raw, expected_magic, path=None):
    """Parse one IDX blob into a uint8 array; the magic's low byte is the rank."""
    if len(raw) < 4:
        raise FormatError("file shorter than the 4-byte magic", path, 0)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path, 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated dimension header", path, len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) != header + size:
        raise FormatError(f"payload is {len(raw) - header} bytes, header promises {size}", path, header)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """MNIST-style IDX pair; images become ``N x 1 x H x W`` floats in [0, 1]."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", labels_path)
    if labels.size and labels.max() > 9:
        raise FormatError("label outside [0, 9]", labels_path)
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), "mnist", 10, {"scale": 255.0})


def idx_bytes(array, magic):
    array = np.asarray(array, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def write_mnist_idx(dataset, images_path, labels_path):
    images = np.rint(dataset.x[:, 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(idx_bytes(images, IDX_IMAGES_MAGIC))
    Path(labels_path).write_bytes(idx_bytes(dataset.y, IDX_LABELS_MAGIC))


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def parse_cifar10(raw, path=None):
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"size {len(raw)} is not a multiple of {CIFAR_RECORD}", path, len(raw) - len(raw) % CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label {labels[bad]} outside [0, 9]", path, bad * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_binary(paths, normalization=None):
    """CIFAR-10 binary batches, per-channel standardised.

    Channel mean/std come from the loaded pixels unless ``normalization``
    (e.g. the train split's) is given; they are stored on the dataset.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    pixels, labels = zip(*(parse_cifar10(_read_bytes(p), p) for p in paths))
    pixels, labels = np.concatenate(pixels), np.concatenate(labels)
    x = pixels.astype(np.float64) / 255.0
    if normalization is None:
        normalization = {
            "mean": x.mean(axis=(0, 2, 3)).tolist(),
            "std": x.std(axis=(0, 2, 3)).tolist(),
        }
    mean = np.asarray(normalization["mean"]).reshape(1, 3, 1, 1)
    std = np.asarray(normalization["std"]).reshape(1, 3, 1, 1)
    return Dataset((x - mean) / std, labels, "cifar10", 10, {"mean": list(normalization["mean"]),
                                                             "std": list(normalization["std"])})


def cifar10_bytes(dataset):
    mean = np.asarray(dataset.normalization["mean"]).reshape(1, 3, 1, 1)
    std = np.asarray(dataset.normalization["std"]).reshape(1, 3, 1, 1)
    pixels = np.rint((dataset.x * std + mean) * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    return np.concatenate([dataset.y.astype(np.uint8)[:, None], pixels], axis=1).tobytes()


def cifar10_files(root=None):
    root = Path(root) if root else data_root()
    base = root / "cifar-10-batches-bin"
    train = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
    return train, [base / "test_batch.bin"]


def load_cifar10(root=None, dtype=np.float64):
    train_paths, test_paths = cifar10_files(root)
    missing = [str(p) for p in train_paths + test_paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 binary files not found: {missing[0]} (set {DATA_ROOT_ENV})")
    train = load_cifar10_binary(train_paths)
    test = load_cifar10_binary(test_paths, train.normalization)
    return train.astype(dtype), test.astype(dtype)


def load_mnist(root=None, dtype=np.float64):
    root = Path(root) if root else data_root()

    def find(stem):
        for cand in (root / stem, root / f"{stem}.gz", root / "mnist" / stem, root / "mnist" / f"{stem}.gz"):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"MNIST file {stem} not found under {root} (set {DATA_ROOT_ENV})")

    train = load_mnist_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = load_mnist_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return train.astype(dtype), test.astype(dtype)


# ---------------------------------------------------------------------------
# synthetic data


def mixture_means(d, classes, separation, seed):
    """Class means with every pairwise distance equal to ``separation`` (needs ``classes <= d``)."""
    rng = np.random.default_rng([seed, 1])
    if classes > d:
        raise ValueError(f"need d >= classes for equidistant means, got d={d}, classes={classes}")
    q, _ = np.linalg.qr(rng.standard_normal((d, classes)))
    return q.T * (separation / np.sqrt(2.0))


def synth_gaussian_mixture(n, d, classes, separation, seed=0):
    """Balanced class-conditional unit-variance Gaussians; deterministic per seed."""
    if n <= 0 or d <= 0 or classes <= 0:
        raise ValueError("n, d and classes must be positive")
    means = mixture_means(d, classes, separation, seed)
    rng = np.random.default_rng([seed, 2])
    y = rng.permutation(np.arange(n) % classes)
    x = means[y] + rng.standard_normal((n, d))
    return Dataset(x, y, f"gmm-d{d}-k{classes}-s{separation:g}", classes,
                   {"separation": float(separation), "seed": int(seed)})


def bayes_predict(x, means):
    """Optimal classifier for equal-prior unit-variance mixtures: nearest mean."""
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def train_test_split(dataset, test_fraction, seed=0):
    rng = np.random.default_rng([seed, 3])
    perm = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]), dataset.name + "-test")


# ---------------------------------------------------------------------------
# sampling


@dataclass
class Sampler:
    """Batch sampler.

    ``poisson``: every step includes each example independently with
    probability ``q`` (what the accountant assumes). ``shuffled``: fixed-size
    slices of a fresh permutation each epoch.
    """

    mode: str
    n: int
    q: float = 0.0
    batch_size: int = 0
    seed: int = 0
    step: int = 0
    _perm: np.ndarray = field(default=None, repr=False)
    _epoch: int = field(default=-1, repr=False)

    def __post_init__(self):
        if self.mode == "poisson":
            if not 0 < self.q <= 1:
                raise ValueError(f"poisson sampling rate must lie in (0, 1], got {self.q}")
        elif self.mode == "shuffled":
            if not 0 < self.batch_size <= self.n:
                raise ValueError(f"batch size must lie in [1, {self.n}], got {self.batch_size}")
        else:
            raise ValueError(f"unknown sampler mode {self.mode!r}")

    @property
    def sampling_mismatch(self):
        return self.mode != "poisson"

    @property
    def steps_per_epoch(self):
        if self.mode == "poisson":
            return max(1, int(round(1.0 / self.q)))
        return self.n // self.batch_size

    def next_indices(self):
        t = self.step
        self.step += 1
        if self.mode == "poisson":
            rng = np.random.default_rng([self.seed, 11, t])
            return np.flatnonzero(rng.random(self.n) < self.q)
        per_epoch = self.steps_per_epoch
        epoch, k = divmod(t, per_epoch)
        if epoch != self._epoch:
            self._perm = np.random.default_rng([self.seed, 12, epoch]).permutation(self.n)
            self._epoch = epoch
        return np.sort(self._perm[k * self.batch_size:(k + 1) * self.batch_size])


def next_batch(sampler, dataset):
    """``(x, y)`` for the sampler's next step; may be empty in poisson mode."""
    idx = sampler.next_indices()
    return dataset.x[idx], dataset.y[idx]


def public_private_split(dataset, fraction, seed=0):
    """Disjoint class-stratified split; ``fraction`` of the examples go public."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng([seed, 21])
    target = int(round(fraction * len(dataset)))
    by_class = [np.flatnonzero(dataset.y == c) for c in range(dataset.num_classes)]
    exact = np.array([fraction * len(ix) for ix in by_class])
    take = np.floor(exact).astype(int)
    # largest remainders get the leftover slots so the total hits `target`
    for c in np.argsort(-(exact - take), kind="stable")[: target - take.sum()]:
        take[c] += 1
    public, private = [], []
    for ix, k in zip(by_class, take):
        ix = rng.permutation(ix)
        public.append(ix[:k])
        private.append(ix[k:])
    pub = np.sort(np.concatenate(public))
    priv = np.sort(np.concatenate(private))
    return dataset.subset(pub, dataset.name + "-public"), dataset.subset(priv, dataset.name + "-private")
