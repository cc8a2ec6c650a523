"""Training runs: data resolution, the epoch loop, evaluation and run records."""

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dpsgd import accountant, data, dp_core, models
from dpsgd import tensor as T
from dpsgd.backend import BACKEND

METRICS_FIELDS = ("epoch", "step", "lr", "train_loss", "train_acc", "test_loss", "test_acc", "epsilon")
METRICS_SCHEMA = "metrics/v1"


def load_datasets(cfg):
    """Train/test datasets for ``cfg``, cast to its dtype and cut to its subsets."""
    dtype = T.resolve_dtype(cfg.dtype)
    if cfg.dataset == "synthetic":
        full = data.synth_gaussian_mixture(cfg.n, cfg.d, cfg.classes, cfg.separation, cfg.seed)
        train, test = data.train_test_split(full, cfg.test_fraction, cfg.seed)
    elif cfg.dataset == "mnist":
        train, test = data.load_mnist(cfg.data_root)
    else:
        train, test = data.load_cifar10(cfg.data_root)
    if cfg.train_subset:
        train = train.subset(np.arange(min(cfg.train_subset, len(train))))
    if cfg.test_subset:
        test = test.subset(np.arange(min(cfg.test_subset, len(test))))
    return train.astype(dtype), test.astype(dtype)


def build_model(cfg, dataset, seed=None):
    return models.model_from_name(cfg.model, dataset.input_shape, dataset.num_classes, cfg.activation,
                                  cfg.norm_groups, cfg.seed if seed is None else seed, T.resolve_dtype(cfg.dtype))


def sampling_plan(cfg, n):
    """``(q, steps_per_epoch)``: the effective batch over the dataset size."""
    eff = cfg.batch_size * cfg.virtual_steps
    if eff > n:
        raise ValueError(f"effective batch {eff} exceeds the {n} training examples")
    return eff / n, max(1, int(round(n / eff)))


def resolve_sigma(cfg, q, steps):
    if cfg.target_epsilon is not None:
        return accountant.find_noise_multiplier(cfg.target_epsilon, q, steps, cfg.delta)
    return float(cfg.noise_multiplier)


def evaluate(model, params, dataset, batch_size=1000):
    """``(mean loss, top-1 accuracy)`` over ``dataset``."""
    if len(dataset) == 0:
        return math.nan, math.nan
    logits = model.logits(dataset.x, params, batch_size)
    loss = float(T.softmax_cross_entropy(logits, dataset.y).mean())
    return loss, float(np.mean(logits.argmax(axis=1) == dataset.y))


@dataclass
class RunRecord:
    config: dict
    metrics: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    privacy: dict = None
    final_test_acc: float = math.nan
    dataset: dict = field(default_factory=dict)
    backend: str = BACKEND
    seed: int = 0
    params: object = field(default=None, repr=False)
    model: object = field(default=None, repr=False)

    def to_json(self):
        body = {
            "config": self.config,
            "seed": self.seed,
            "backend": self.backend,
            "dataset": self.dataset,
            "privacy": self.privacy,
            "final_test_acc": self.final_test_acc,
            "metrics": self.metrics,
            "epoch_wall_time_s": self.wall_times,
            "metrics_schema": METRICS_SCHEMA,
        }
        return json.dumps(body, indent=2, sort_keys=True, default=_json_default)

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, METRICS_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.metrics:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def write(self, out_dir, stem="run"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        (out / f"{stem}_metrics.csv").write_text(self.metrics_csv())
        if self.model is not None:
            models.save_model(out / f"{stem}_model.ckpt", self.model.with_params(self.params))
        return out


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _split_virtual(x, y, parts):
    # poisson batches vary in size; array_split keeps every example
    idx = np.array_split(np.arange(len(y)), parts)
    return [(x[i], y[i]) for i in idx]


def privacy_report(cfg, sigma, q, steps):
    if cfg.clip_norm is None or sigma == 0:
        return None
    eps, order = accountant.AccountantState(q, sigma).compose(steps).spent(cfg.delta)
    return {
        "epsilon": eps,
        "delta": cfg.delta,
        "sigma": sigma,
        "q": q,
        "steps": steps,
        "order": order,
        "sampling": cfg.sampler,
        "sampling_mismatch": cfg.sampler != "poisson",
    }


def train(cfg, train_ds=None, test_ds=None, model=None, log=None):
    """Run DP-SGD (or plain SGD) per ``cfg``; returns a :class:`RunRecord`.

    ``model`` may be supplied (e.g. a pre-trained, partially frozen one);
    otherwise it is built from the config.
    """
    cfg.validate()
    if train_ds is None:
        train_ds, test_ds = load_datasets(cfg)
    model = build_model(cfg, train_ds) if model is None else model
    q, spe = sampling_plan(cfg, len(train_ds))
    dp_cfg = cfg.dp_config(0.0, spe)
    total = dp_cfg.total_steps
    sigma = resolve_sigma(cfg, q, total)
    dp_cfg = cfg.dp_config(sigma, spe)

    if cfg.sampler == "poisson":
        sampler = data.Sampler("poisson", len(train_ds), q=q, seed=cfg.seed)
    else:
        sampler = data.Sampler("shuffled", len(train_ds), batch_size=dp_cfg.effective_batch, seed=cfg.seed)
    eval_train = train_ds
    if cfg.eval_train_max and len(train_ds) > cfg.eval_train_max:
        eval_train = train_ds.subset(np.arange(cfg.eval_train_max))

    params = model.params
    state = dp_core.OptimizerState.init(params)
    record = RunRecord(config=cfg.to_dict(), seed=cfg.seed, model=model,
                       dataset={"name": train_ds.name, "train": len(train_ds), "test": len(test_ds),
                                "normalization": train_ds.normalization})
    step = 0
    n_epochs = math.ceil(total / spe)
    for epoch in range(1, n_epochs + 1):
        t0 = time.perf_counter()
        for _ in range(min(spe, total - step)):
            x, y = data.next_batch(sampler, train_ds)
            params, state, _ = dp_core.dp_sgd_step(state, model, params, _split_virtual(x, y, cfg.virtual_steps),
                                                   dp_cfg)
            step += 1
        elapsed = time.perf_counter() - t0
        tr_loss, tr_acc = evaluate(model, params, eval_train)
        te_loss, te_acc = evaluate(model, params, test_ds)
        rep = privacy_report(cfg, sigma, q, step)
        row = {
            "epoch": epoch, "step": step, "lr": lr_for_log(step, dp_cfg),
            "train_loss": tr_loss, "train_acc": tr_acc, "test_loss": te_loss, "test_acc": te_acc,
            "epsilon": rep["epsilon"] if rep else 0.0,
        }
        record.metrics.append(row)
        record.wall_times.append(elapsed)
        if log:
            log(f"epoch {epoch}/{n_epochs} step {step} train_acc {tr_acc:.4f} test_acc {te_acc:.4f}"
                f" eps {row['epsilon']:.4g} ({elapsed:.1f}s)")
    record.params = params
    record.privacy = privacy_report(cfg, sigma, q, step)
    record.final_test_acc = record.metrics[-1]["test_acc"] if record.metrics else math.nan
    return record


def lr_for_log(step, dp_cfg):
    return dp_core.lr_at(min(step, dp_cfg.total_steps), dp_cfg)
