"""Forward-pass time versus thread count on one layer.

    python3 scripts/thread_scaling.py --layer 13 --minibatch 8 --threads 1,2,4
"""

import argparse
import os

from directconv.bench import BenchConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--layer", type=int, default=13)
    ap.add_argument("--minibatch", type=int, default=8)
    ap.add_argument("--iters", type=int, default=10)
    ap.add_argument("--threads", default="1,2,4")
    ap.add_argument("--pass", dest="pass_", default="F", choices=["F", "B", "U"])
    args = ap.parse_args()
    print(f"cpus available: {len(os.sched_getaffinity(0))}")
    base = None
    for T in (int(x) for x in args.threads.split(",")):
        r = run_benchmark(BenchConfig(layer_ids=(args.layer,), minibatch=args.minibatch, iterations=args.iters,
                                      pass_=args.pass_, threads=T)).layers[0]
        base = base or r.best
        print(f"T={T:>3}  best {r.best * 1e3:8.2f} ms  {r.gflops:6.2f} GFLOPS  speedup {base / r.best:5.2f}x  "
              f"{r.metadata.get('strategy', '')}")


if __name__ == "__main__":
    main()
