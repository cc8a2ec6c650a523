"""Experiment configuration: one JSON document, overridable field by field."""

import json
from dataclasses import asdict, dataclass, field, fields

from dpsgd import dp_core


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # model
    model: str = "logreg"
    activation: str = "tanh"
    norm_groups: int = 0
    dtype: str = "float64"
    # data
    dataset: str = "synthetic"  # synthetic | mnist | cifar10
    data_root: str = None
    n: int = 10000
    d: int = 20
    classes: int = 2
    separation: float = 10.0
    test_fraction: float = 0.2
    train_subset: int = 0  # keep only this many training examples (0 = all)
    test_subset: int = 0
    # sampling and optimisation
    sampler: str = "poisson"
    batch_size: int = 256
    virtual_steps: int = 1
    epochs: float = 5.0
    max_lr: float = 0.1
    warmup_epochs: float = None  # None: 1 for runs of <= 10 epochs, else 5
    schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 0.0
    weight_decay_mode: str = "post_clip"
    grad_path: str = "fast"
    # privacy
    clip_norm: float = 1.0
    noise_multiplier: float = None
    target_epsilon: float = None
    delta: float = 1e-5
    shards: int = 1
    # sweeps
    lr_grid: list = field(default_factory=list)
    clip_grid: list = field(default_factory=list)
    batch_grid: list = field(default_factory=list)
    epochs_grid: list = field(default_factory=list)
    tune_tolerance: float = 0.01
    tune_refine: bool = False
    tune_heatmap: bool = True
    # fine-tuning
    public_fraction: float = 0.5
    freeze: int = 0
    pretrain_epochs: float = 10.0
    pretrain_lr: float = None
    # bookkeeping
    eval_train_max: int = 10000
    out_dir: str = None
    seed: int = 0

    def validate(self, sweeping=None):
        if (self.noise_multiplier is None) == (self.target_epsilon is None):
            raise ConfigError("give exactly one of noise_multiplier and target_epsilon")
        if self.target_epsilon is not None and not self.target_epsilon > 0:
            raise ConfigError("target_epsilon must be positive")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ConfigError("noise_multiplier must be non-negative")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.target_epsilon is not None and self.clip_norm is None:
            raise ConfigError("an epsilon target needs clipping (set clip_norm)")
        if self.sampler not in ("poisson", "shuffled"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.dataset not in ("synthetic", "mnist", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        for grid in sweeping or ():
            if not getattr(self, grid):
                raise ConfigError(f"{grid} must be non-empty for this command")
        return self

    @property
    def resolved_warmup(self):
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return 1.0 if self.epochs <= 10 else 5.0

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return ExperimentConfig(**data)

    def to_dict(self):
        return asdict(self)

    def dp_config(self, sigma, steps_per_epoch):
        return dp_core.DpSgdConfig(
            clip_norm=self.clip_norm,
            noise_multiplier=sigma,
            shards=self.shards,
            batch_size=self.batch_size,
            virtual_steps=self.virtual_steps,
            max_lr=self.max_lr,
            warmup_epochs=min(self.resolved_warmup, self.epochs),
            epochs=self.epochs,
            steps_per_epoch=steps_per_epoch,
            schedule=self.schedule,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            weight_decay_mode=self.weight_decay_mode,
            seed=self.seed,
            grad_path=self.grad_path,
        )


FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def from_dict(data):
    unknown = set(data) - FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**data)


def load(path):
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data)


def parse_value(text):
    """JSON if it parses (numbers, lists, null, true), otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, assignments):
    """Apply ``key=value`` strings on top of ``cfg``."""
    changes = {}
    for item in assignments or ():
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        if key not in FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = parse_value(value)
    return cfg.replace(**changes) if changes else cfg
