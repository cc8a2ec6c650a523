"""Multi-run experiments: clip/learning-rate tuning, fixed-epsilon sweeps, public-to-private fine-tuning."""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dpsgd import accountant, data, models, training


class TuneError(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])
    return buf.getvalue()


def _non_private(cfg):
    return cfg.replace(clip_norm=None, noise_multiplier=0.0, target_epsilon=None)


# ---------------------------------------------------------------------------
# clip / learning-rate tuning


@dataclass
class TuneResult:
    lr_public: float
    clip_norm: float
    lr: float
    sigma: float
    reference_acc: float
    table: list = field(default_factory=list)

    TABLE_FIELDS = ("phase", "clip_norm", "lr", "sigma", "test_acc", "epsilon")

    def table_csv(self):
        return _csv(self.table, self.TABLE_FIELDS)

    def heatmap_csv(self):
        return _csv([r for r in self.table if r["phase"] in ("heatmap", "lr_sweep", "refine")], self.TABLE_FIELDS)


def _row(phase, rec, clip, lr):
    return {
        "phase": phase,
        "clip_norm": "none" if clip is None else float(clip),
        "lr": float(lr),
        "sigma": rec.privacy["sigma"] if rec.privacy else 0.0,
        "test_acc": rec.final_test_acc,
        "epsilon": rec.privacy["epsilon"] if rec.privacy else 0.0,
    }


def tune(cfg, train_ds=None, test_ds=None, log=None):
    """Four-step clip/learning-rate search.

    1. Pick the best rate of ``lr_grid`` without clipping or noise; its
       accuracy is the reference.
    2. At that rate and zero noise, find the smallest clip norm in
       ``clip_grid`` whose accuracy stays within ``tune_tolerance`` of the
       unclipped run.
    3. Fix that clip norm, set the noise from the privacy budget and sweep
       ``lr_grid``.
    4. Optionally refine on a 3x3 local grid around the winner.

    With ``tune_heatmap`` every (clip, lr) cell of the two grids is also run
    privately. Accuracies are on the test split and every cell is reported;
    picking the maximum is optimistic.
    """
    cfg.validate(sweeping=("clip_grid", "lr_grid"))
    if train_ds is None:
        train_ds, test_ds = training.load_datasets(cfg)
    table = []

    def run(phase, c, clip, lr):
        rec = training.train(c.replace(clip_norm=clip, max_lr=lr), train_ds, test_ds)
        table.append(_row(phase, rec, clip, lr))
        if log:
            log(f"{phase}: C={clip} lr={lr:g} acc={rec.final_test_acc:.4f}")
        return rec.final_test_acc

    public = _non_private(cfg)
    # step 1
    accs = {lr: run("lr_public", public, None, lr) for lr in cfg.lr_grid}
    lr_pub = max(accs, key=lambda k: (accs[k], -k))
    ref = accs[lr_pub]
    # step 2
    clip_acc = {}
    for c in sorted(cfg.clip_grid):
        clip_acc[c] = run("clip_sweep", public.replace(clip_norm=c), c, lr_pub)
    feasible = [c for c in sorted(clip_acc) if clip_acc[c] >= ref - cfg.tune_tolerance]
    if not feasible:
        raise TuneError(
            f"no clip norm within {cfg.tune_tolerance} of the unclipped accuracy {ref:.4f}",
            {"reference_acc": ref, "lr_public": lr_pub, "clip_accuracy": clip_acc, "table": table},
        )
    c_best = feasible[0]
    # step 3
    lr_acc = {lr: run("lr_sweep", cfg, c_best, lr) for lr in cfg.lr_grid}
    lr_best = max(lr_acc, key=lambda k: (lr_acc[k], -k))
    best = (lr_acc[lr_best], c_best, lr_best)
    # step 4
    if cfg.tune_refine:
        for c in (c_best / 2, c_best, c_best * 2):
            for lr in (lr_best / 2, lr_best, lr_best * 2):
                if (c, lr) == (c_best, lr_best):
                    continue
                acc = run("refine", cfg, c, lr)
                if acc > best[0]:
                    best = (acc, c, lr)
    if cfg.tune_heatmap:
        for c in sorted(cfg.clip_grid):
            for lr in cfg.lr_grid:
                run("heatmap", cfg, c, lr)
    sigma = next(r["sigma"] for r in table if r["phase"] == "lr_sweep")
    return TuneResult(lr_pub, best[1], best[2], sigma, ref, table)


def best_cells(table, phase="heatmap", k=2):
    rows = [r for r in table if r["phase"] == phase]
    return sorted(rows, key=lambda r: (-r["test_acc"], r["clip_norm"], r["lr"]))[:k]


# ---------------------------------------------------------------------------
# fixed-epsilon epoch sweep


SWEEP_FIELDS = ("epochs", "sigma", "epsilon", "best_lr", "best_test_acc")


def fixed_eps_sweep(cfg, train_ds=None, test_ds=None, log=None):
    """Best accuracy per epoch count at a fixed privacy budget.

    Returns ``(rows, cells)``: one summary row per epoch count and every
    (epochs, lr) cell.
    """
    cfg.validate(sweeping=("epochs_grid",))
    if cfg.target_epsilon is None:
        raise ValueError("fixed-epsilon sweep needs target_epsilon")
    if train_ds is None:
        train_ds, test_ds = training.load_datasets(cfg)
    lrs = cfg.lr_grid or [cfg.max_lr]
    rows, cells = [], []
    last_sigma = 0.0
    for ep in sorted(cfg.epochs_grid):
        c = cfg.replace(epochs=ep)
        q, spe = training.sampling_plan(c, len(train_ds))
        steps = c.dp_config(0.0, spe).total_steps
        sigma = accountant.find_noise_multiplier(c.target_epsilon, q, steps, c.delta)
        if not sigma > last_sigma:
            raise AssertionError(f"noise multiplier not increasing with epochs at {ep}: {sigma} <= {last_sigma}")
        last_sigma = sigma
        best = None
        for lr in lrs:
            rec = training.train(c.replace(max_lr=lr), train_ds, test_ds)
            cells.append({"epochs": ep, "lr": lr, "sigma": sigma, "test_acc": rec.final_test_acc,
                          "epsilon": rec.privacy["epsilon"]})
            if best is None or rec.final_test_acc > best[0]:
                best = (rec.final_test_acc, lr, rec.privacy["epsilon"])
        rows.append({"epochs": ep, "sigma": sigma, "epsilon": best[2], "best_lr": best[1], "best_test_acc": best[0]})
        if log:
            log(f"epochs {ep}: sigma {sigma:.4f} best acc {best[0]:.4f} at lr {best[1]:g}")
    return rows, cells


def sweep_csv(rows):
    return _csv(rows, SWEEP_FIELDS)


# ---------------------------------------------------------------------------
# public pre-training, private fine-tuning


@dataclass
class FinetuneResult:
    pretrain: object
    finetune: object
    scratch: object = None
    frozen_unchanged: bool = True


def finetune(cfg, train_ds=None, test_ds=None, with_scratch=True, log=None):
    """Pre-train non-privately on the public part, then DP fine-tune on the private part.

    The head is replaced by a fresh one and the first ``cfg.freeze`` block
    groups are frozen. Only the fine-tuning steps are accounted. With
    ``with_scratch`` a from-scratch DP run on the same private data and
    budget is added for comparison.
    """
    cfg.validate()
    if train_ds is None:
        train_ds, test_ds = training.load_datasets(cfg)
    public, private = data.public_private_split(train_ds, cfg.public_fraction, cfg.seed)
    pre_cfg = _non_private(cfg).replace(epochs=cfg.pretrain_epochs, max_lr=cfg.pretrain_lr or cfg.max_lr,
                                        warmup_epochs=None)
    pre = training.train(pre_cfg, public, test_ds)
    if log:
        log(f"pretrain (public, {len(public)} examples): acc {pre.final_test_acc:.4f}")

    base = pre.model.with_params(pre.params)
    model = models.apply_freeze(models.replace_head(base, seed=cfg.seed + 1), models.FreezePlan(cfg.freeze))
    frozen = {n: model.params[n] for n in model.params.names() if not model.params.is_trainable(n)}
    ft = training.train(cfg, private, test_ds, model=model)
    unchanged = all(np.array_equal(ft.params[n], v) and ft.params[n].tobytes() == v.tobytes()
                    for n, v in frozen.items())
    if log:
        log(f"finetune (private, {len(private)} examples, {len(frozen)} frozen tensors): "
            f"acc {ft.final_test_acc:.4f} eps {ft.privacy['epsilon'] if ft.privacy else 0:.4g}")
    scratch = None
    if with_scratch:
        scratch = training.train(cfg, private, test_ds)
        if log:
            log(f"scratch (private): acc {scratch.final_test_acc:.4f}")
    return FinetuneResult(pre, ft, scratch, unchanged)


def write_table(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)

