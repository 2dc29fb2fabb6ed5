"""Sweep the ResNet-50 layer table over passes and implementations, one report per combination.

    python3 scripts/run_resnet50.py --minibatch 4 --iters 5 --threads 1 --out-dir results/
"""

import argparse
from pathlib import Path

from directconv.bench import BenchConfig, run_benchmark

COMBOS = [
    ("F", "f32", "direct"), ("F", "f32", "im2col"), ("F", "f32", "naive"), ("F", "i16", "direct"),
    ("B", "f32", "direct"), ("U", "f32", "direct"),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--minibatch", type=int, default=4)
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--layers", default="resnet50")
    ap.add_argument("--layer-ids", default=None, help="comma-separated subset")
    ap.add_argument("--skip-naive", action="store_true", help="the naive loops take minutes on the full table")
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()
    ids = tuple(int(x) for x in args.layer_ids.split(",")) if args.layer_ids else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for pass_, dtype, impl in COMBOS:
        if impl == "naive" and args.skip_naive:
            continue
        cfg = BenchConfig(layers=args.layers, minibatch=args.minibatch, iterations=args.iters, pass_=pass_,
                          dtype=dtype, impl=impl, threads=args.threads, check=True, layer_ids=ids)
        report = run_benchmark(cfg)
        print(f"\n== pass {pass_}  {dtype}  {impl}  N={args.minibatch} T={args.threads}")
        print(report.table())
        report.write(out / f"{pass_}_{dtype}_{impl}.json")


if __name__ == "__main__":
    main()
