"""``bench`` command line."""

from __future__ import annotations

import argparse
import sys

from .bench import DTYPES, FUSIONS, IMPLS, PASSES, BenchConfig, run_benchmark
from .config import DEFAULT_CONFIG, EngineConfig
from .errors import ConvError


def _ids(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Time and check convolution passes on a layer table.")
    p.add_argument("--layers", default="resnet50", help="layer CSV file, or 'resnet50' for the builtin table")
    p.add_argument("--layer-ids", type=_ids, default=None, help="comma-separated subset of layer ids")
    p.add_argument("--minibatch", type=int, default=1)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--pass", dest="pass_", choices=PASSES, default="F")
    p.add_argument("--dtype", choices=DTYPES, default="f32")
    p.add_argument("--impl", choices=IMPLS, default="direct")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--check", action="store_true", help="compare against the naive oracle")
    p.add_argument("--fuse", choices=FUSIONS, default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON file of engine tunables")
    p.add_argument("--dump-dir", default=None, help="write reference and output tensors (CFT1) when checking")
    p.add_argument("--out", default=None, help="report path; .csv for CSV, anything else for JSON")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        engine = EngineConfig.from_file(args.config) if args.config else DEFAULT_CONFIG
        cfg = BenchConfig(layers=args.layers, minibatch=args.minibatch, iterations=args.iters, pass_=args.pass_,
                          dtype=args.dtype, impl=args.impl, threads=args.threads, check=args.check,
                          fuse=args.fuse, seed=args.seed, layer_ids=args.layer_ids, engine=engine,
                          dump_dir=args.dump_dir)
        report = run_benchmark(cfg)
    except (ConvError, ValueError, NotImplementedError, OSError) as e:
        print(f"bench: error: {e}", file=sys.stderr)
        return 2
    print(report.table())
    if args.out:
        report.write(args.out)
    if args.check and not report.ok:
        print("bench: check FAILED", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
