"""Command line interface.

    dpsgd train --config run.json --set epochs=10 --out runs/a
    dpsgd accountant epsilon --sigma 1.5 --q 0.01 --steps 10000 --delta 1e-5
    dpsgd accountant sigma --epsilon 3 --q 0.01 --steps 10000 --delta 1e-5
    dpsgd accountant delta-curve --sigma 1.5 --q 0.01 --steps 10000
    dpsgd accountant batch-curve
    dpsgd tune --config tune.json
    dpsgd fixed-eps-sweep --config sweep.json
    dpsgd finetune --config ft.json
    dpsgd bench [--kernels]

Failures exit nonzero and print one JSON object ``{"error": ..., "message": ...}``
on stderr.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from dpsgd import __version__, accountant, bench, config, experiments, training

log = logging.getLogger("dpsgd")

CURVE_BATCHES = [1024 * 4 ** i for i in range(6)]


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        sys.exit(2)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _finite(x):
    return x if x is None or math.isfinite(x) else str(x)


def _load_config(args):
    cfg = config.load(args.config) if args.config else config.ExperimentConfig()
    cfg = config.apply_overrides(cfg, args.set)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    if cfg.noise_multiplier is None and cfg.target_epsilon is None:
        cfg = cfg.replace(noise_multiplier=0.0)
    return cfg


def _out_dir(cfg, command):
    return Path(cfg.out_dir or Path("runs") / command)


def _write_config(out, cfg):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = _load_config(args)
    rec = training.train(cfg, log=log.info)
    out = _out_dir(cfg, "train")
    rec.write(out)
    _write_config(out, cfg)
    p = rec.privacy or {}
    _emit({"epsilon": p.get("epsilon", 0.0), "delta": p.get("delta"), "sigma": p.get("sigma", 0.0),
           "steps": p.get("steps"), "test_acc": rec.final_test_acc, "out": str(out),
           "sampling_mismatch": p.get("sampling_mismatch", cfg.sampler != "poisson")})
    return 0


def cmd_accountant(args):
    kw = {"conversion": args.conversion}
    if args.what == "epsilon":
        eps, order = accountant.compute_epsilon_and_order(args.sigma, args.q, args.steps, args.delta, **kw)
        _emit({"epsilon": _finite(eps), "order": None if math.isnan(order) else order, "sigma": args.sigma,
               "q": args.q, "steps": args.steps, "delta": args.delta})
    elif args.what == "sigma":
        sigma = accountant.find_noise_multiplier(args.epsilon, args.q, args.steps, args.delta, **kw)
        eps = accountant.compute_epsilon(sigma, args.q, args.steps, args.delta, **kw)
        _emit({"sigma": sigma, "epsilon": eps, "target_epsilon": args.epsilon, "q": args.q, "steps": args.steps,
               "delta": args.delta})
    elif args.what == "delta-curve":
        deltas = args.deltas or list(np.logspace(math.log10(args.delta_min), math.log10(args.delta_max),
                                                 args.points))
        rows = accountant.epsilon_curve(args.sigma, args.q, args.steps, sorted(deltas), **kw)
        _write_rows(args.out, rows, accountant.write_epsilon_curve)
    else:
        rows = accountant.batch_scaling_curve(args.base_sigma, args.base_batch, args.n, args.steps, args.delta,
                                              args.batches or CURVE_BATCHES, **kw)
        _write_rows(args.out, rows, accountant.write_batch_curve)
    return 0


def _write_rows(out, rows, writer):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        writer(out, rows)
    else:
        writer(sys.stdout, rows)


def cmd_tune(args):
    cfg = _load_config(args)
    out = _out_dir(cfg, "tune")
    try:
        res = experiments.tune(cfg, log=log.info)
    except experiments.TuneError as e:
        _write_config(out, cfg)
        (out / "tune_diagnostics.json").write_text(json.dumps(e.diagnostics, indent=2, default=_default) + "\n")
        raise
    _write_config(out, cfg)
    experiments.write_table(out / "sweep.csv", res.table_csv())
    experiments.write_table(out / "heatmap.csv", res.heatmap_csv())
    _emit({"lr_public": res.lr_public, "clip_norm": res.clip_norm, "lr": res.lr, "sigma": res.sigma,
           "reference_acc": res.reference_acc, "best": experiments.best_cells(res.table, "lr_sweep", 1)[0],
           "out": str(out)})
    return 0


def cmd_fixed_eps_sweep(args):
    cfg = _load_config(args)
    out = _out_dir(cfg, "fixed-eps-sweep")
    rows, cells = experiments.fixed_eps_sweep(cfg, log=log.info)
    _write_config(out, cfg)
    experiments.write_table(out / "sweep.csv", experiments.sweep_csv(rows))
    (out / "cells.json").write_text(json.dumps(cells, indent=2, default=_default) + "\n")
    _emit({"rows": rows, "out": str(out)})
    return 0


def cmd_finetune(args):
    cfg = _load_config(args)
    out = _out_dir(cfg, "finetune")
    res = experiments.finetune(cfg, with_scratch=not args.no_scratch, log=log.info)
    _write_config(out, cfg)
    res.pretrain.write(out, "pretrain")
    res.finetune.write(out, "finetune")
    summary = {"pretrain_acc": res.pretrain.final_test_acc, "finetune_acc": res.finetune.final_test_acc,
               "finetune_privacy": res.finetune.privacy, "frozen_unchanged": res.frozen_unchanged, "out": str(out)}
    if res.scratch is not None:
        res.scratch.write(out, "scratch")
        summary["scratch_acc"] = res.scratch.final_test_acc
    _emit(summary)
    return 0


def cmd_bench(args):
    report = {}
    if args.kernels:
        report["kernels"] = bench.bench_kernels(args.repeat)
    else:
        report["training"] = [bench.bench_training(b, args.epochs, args.warmup) for b in args.batch_sizes]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    _emit(report)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_args(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable); values parse as JSON when possible")
    p.add_argument("--out", help="output directory (default runs/<command>)")


def _positive_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _prob(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1], got {text}")
    return v


def _delta(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"delta must lie in (0, 1), got {text}")
    return v


def _nonneg(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def build_parser():
    p = Parser(prog="dpsgd", description="Differentially private SGD and Renyi-DP accounting.")
    p.add_argument("--version", action="version", version=f"dpsgd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    verbose = Parser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                         help="log progress to stderr")

    t = sub.add_parser("train", help="train one model", parents=[verbose])
    _add_config_args(t)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("accountant", help="privacy accounting queries")
    asub = a.add_subparsers(dest="what", required=True, parser_class=Parser)
    for name in ("epsilon", "sigma", "delta-curve", "batch-curve"):
        s = asub.add_parser(name)
        s.add_argument("--conversion", choices=accountant.CONVERSIONS, default="improved")
        s.set_defaults(func=cmd_accountant)
        if name != "batch-curve":
            s.add_argument("--q", type=_prob, required=True, help="sampling rate")
            s.add_argument("--steps", type=_positive_int, required=True)
        if name in ("epsilon", "delta-curve"):
            s.add_argument("--sigma", type=_nonneg, required=True, help="noise multiplier")
        if name in ("epsilon", "sigma"):
            s.add_argument("--delta", type=_delta, required=True)
        if name == "sigma":
            s.add_argument("--epsilon", type=float, required=True, help="target epsilon")
        if name == "delta-curve":
            s.add_argument("--deltas", type=_delta, nargs="+")
            s.add_argument("--delta-min", type=_delta, default=1e-9)
            s.add_argument("--delta-max", type=_delta, default=1e-3)
            s.add_argument("--points", type=int, default=13)
            s.add_argument("--out", help="CSV path (default stdout)")
        if name == "batch-curve":
            s.add_argument("--base-sigma", type=_nonneg, default=0.001 * math.sqrt(8))
            s.add_argument("--base-batch", type=int, default=1024)
            s.add_argument("--n", type=int, default=1281167, help="dataset size")
            s.add_argument("--steps", type=_positive_int, default=12510)
            s.add_argument("--delta", type=_delta, default=1e-6)
            s.add_argument("--batches", type=int, nargs="+")
            s.add_argument("--out", help="CSV path (default stdout)")

    for name, func, help_ in (("tune", cmd_tune, "clip-norm / learning-rate tuning procedure"),
                              ("fixed-eps-sweep", cmd_fixed_eps_sweep, "epochs vs noise at a fixed epsilon"),
                              ("finetune", cmd_finetune, "public pre-training then private fine-tuning")):
        s = sub.add_parser(name, help=help_, parents=[verbose])
        _add_config_args(s)
        s.set_defaults(func=func)
        if name == "finetune":
            s.add_argument("--no-scratch", action="store_true", help="skip the from-scratch baseline")

    b = sub.add_parser("bench", help="timing benchmarks", parents=[verbose])
    b.add_argument("--kernels", action="store_true", help="compare compiled and numpy kernels instead")
    b.add_argument("--batch-sizes", type=int, nargs="+", default=[256])
    b.add_argument("--epochs", type=int, default=3)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--out", help="write the JSON report here too")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, AssertionError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
