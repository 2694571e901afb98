"""Activation separation sweep: best-of-grid test error against n, per activation.

    python scripts/run_separation.py [--preset desk|paper] [--seed 0] [--workers 1] [--out DIR]
"""

import argparse
import time
from pathlib import Path

from smoothnet.learn import run_separation_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/separation")
    args = ap.parse_args()
    t0 = time.time()
    res = run_separation_experiment(args.preset, args.seed, args.workers,
                                    progress=lambda key: print(f"{time.time() - t0:8.1f}s done {key}", flush=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.csv", "w", newline="\n") as fh:
        fh.write("activation,n,run,eta,lambda,gen_error\n")
        for a, n, r, e, l, g in res.records:
            fh.write(f"{a},{n},{r},{e:.17g},{l:.17g},{g:.17g}\n")
    for a, (alpha, r2, means) in res.summary.items():
        print(f"{a:14s} alpha={alpha:.4f} r2={r2:.3f} means=" + " ".join(f"{m:.4g}" for m in means))
    print(f"total {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
