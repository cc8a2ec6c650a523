"""Timing: epoch cost of non-private vs DP training, and compiled vs fallback kernels."""

import time

import numpy as np

from dpsgd import autodiff as AD
from dpsgd import backend, data, dp_core, models
from dpsgd.accountant import DEFAULT_ORDERS

REFERENCE_MLP = {"d": 256, "hidden": (256, 256), "classes": 10, "n": 8192}

MODES = {
    "non_private": {"clip_norm": None, "noise_multiplier": 0.0, "grad_path": "fast"},
    "dp_fast": {"clip_norm": 1.0, "noise_multiplier": 1.0, "grad_path": "fast"},
    "dp_naive": {"clip_norm": 1.0, "noise_multiplier": 1.0, "grad_path": "materialize"},
}


def _epoch_times(model, ds, batch_size, mode, epochs, warmup, seed):
    spe = len(ds) // batch_size
    cfg = dp_core.DpSgdConfig(batch_size=batch_size, max_lr=0.05, epochs=epochs + warmup, steps_per_epoch=spe,
                              momentum=0.9, seed=seed, schedule="constant", **MODES[mode])
    sampler = data.Sampler("shuffled", len(ds), batch_size=batch_size, seed=seed)
    params, state = model.params, dp_core.OptimizerState.init(model.params)
    times = []
    for _ in range(epochs + warmup):
        t0 = time.perf_counter()
        for _ in range(spe):
            params, state, _ = dp_core.dp_sgd_step(state, model, params, [data.next_batch(sampler, ds)], cfg)
        times.append(time.perf_counter() - t0)
    return times[warmup:]


def bench_training(batch_size=256, epochs=3, warmup=1, seed=0, modes=tuple(MODES), ref=None):
    """Mean epoch wall time per mode on the reference MLP, plus ratios to non-private."""
    ref = dict(REFERENCE_MLP, **(ref or {}))
    ds = data.synth_gaussian_mixture(ref["n"], ref["d"], ref["classes"], 3.0, seed)
    model = models.mlp((ref["d"],), ref["classes"], ref["hidden"], seed=seed)
    report = {"batch_size": batch_size, "epochs_timed": epochs, "warmup_epochs": warmup,
              "model": model.name, "params": model.params.num_params(), "n": ref["n"], "backend": backend.BACKEND,
              "epoch_time_s": {}}
    for mode in modes:
        report["epoch_time_s"][mode] = float(np.mean(_epoch_times(model, ds, batch_size, mode, epochs, warmup, seed)))
    base = report["epoch_time_s"].get("non_private")
    if base:
        report["ratio_to_non_private"] = {m: t / base for m, t in report["epoch_time_s"].items()}
    report["dp_paths_max_abs_diff"] = dp_path_agreement(model, ds, batch_size, seed)
    return report


def dp_path_agreement(model, ds, batch_size, seed=0):
    """Largest parameter difference after one identical DP step via the fast and naive paths."""
    x, y = ds.x[:batch_size], ds.y[:batch_size]
    out = []
    for path in ("fast", "materialize"):
        cfg = dp_core.DpSgdConfig(clip_norm=1.0, noise_multiplier=1.0, batch_size=batch_size, max_lr=0.1,
                                  momentum=0.9, seed=seed, grad_path=path)
        p, _, _ = dp_core.dp_sgd_step(dp_core.OptimizerState.init(model.params), model, model.params, [(x, y)], cfg)
        out.append(p.flatten())
    return float(np.max(np.abs(out[0] - out[1])))


def bench_batch_scaling(batch_grid=(64, 128, 256, 512), epochs=1, warmup=1, seed=0):
    return [bench_training(b, epochs, warmup, seed) for b in batch_grid]


# ---------------------------------------------------------------------------
# kernel backends


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((64, 16, 32, 32))
    w = rng.standard_normal((32, 16, 3, 3))
    cols_shape = (64, 32 * 32, 16 * 9)
    cols = rng.standard_normal(cols_shape)
    frac = [a for a in DEFAULT_ORDERS if not float(a).is_integer()]
    ints = [int(a) for a in DEFAULT_ORDERS if float(a).is_integer()]

    def accountant_grid(k):
        def run():
            for a in frac:
                k.log_a_frac(0.01, 1.5, a)
            for a in ints:
                k.log_a_int(0.01, 1.5, a)
        return run

    return {
        "accountant_orders": accountant_grid,
        "im2col": lambda k: (lambda: k.im2col(x, 3, 3, 1, 1)),
        "col2im": lambda k: (lambda: k.col2im(cols, x.shape, 3, 3, 1, 1)),
        "conv2d_direct": lambda k: (lambda: k.conv2d_direct(x, w, 1, 1)),
        "max_pool2d": lambda k: (lambda: k.max_pool2d(x, 2, 2)),
    }


def bench_kernels(repeat=3, seed=0):
    """Best-of-``repeat`` seconds per kernel for each available backend."""
    impls = {n: backend.get(n) for n in backend.available()}
    rows = []
    for name, make in kernel_cases(seed).items():
        row = {"kernel": name}
        for label, mod in impls.items():
            row[label] = _best_of(make(mod), repeat)
        if "compiled" in row:
            row["speedup"] = row["python"] / row["compiled"]
        rows.append(row)
    return rows


def bench_per_example_norms(batch_size=256, seed=0):
    """Seconds for per-example norms: factored (fast) vs materialised gradients."""
    rng = np.random.default_rng(seed)
    model = models.mlp((REFERENCE_MLP["d"],), 10, REFERENCE_MLP["hidden"], seed=seed)
    x = rng.standard_normal((batch_size, REFERENCE_MLP["d"]))
    y = rng.integers(0, 10, batch_size)
    _, graph = AD.forward_per_example(model, x, y)
    return {
        "factored": _best_of(lambda: AD.per_example_grad_norms(graph), 3),
        "materialized": _best_of(lambda: [AD.tree_norm(t) for t in AD.per_example_grads(graph)], 3),
    }
