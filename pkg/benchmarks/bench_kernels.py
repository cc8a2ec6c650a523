"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --repeat 5 --out kernels.json

Also times per-example gradient norms (factored vs materialised) and a
short DP training run against plain SGD on the reference MLP.
"""

import argparse
import json

from dpsgd import backend, bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--skip-training", action="store_true")
    ap.add_argument("--out")
    args = ap.parse_args()

    if "compiled" not in backend.available():
        print("compiled extension not built; only the numpy fallback will be timed")
    rows = bench.bench_kernels(args.repeat)
    print(f"{'kernel':<20}{'python s':>12}{'compiled s':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['python']:>12.4f}{r.get('compiled', float('nan')):>12.4f}"
              f"{r.get('speedup', float('nan')):>10.1f}")
    report = {"kernels": rows, "per_example_norms": bench.bench_per_example_norms()}
    print("per-example norms (s):", report["per_example_norms"])
    if not args.skip_training:
        report["training"] = bench.bench_training(epochs=2, warmup=1, modes=("non_private", "dp_fast"))
        print("epoch time ratio to non-private:", report["training"]["ratio_to_non_private"])
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2)


if __name__ == "__main__":
    main()
