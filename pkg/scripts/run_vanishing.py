"""Vanishing ratio at the first 95%-training-accuracy point, per pooling and seed.

    python3 scripts/run_vanishing.py --seeds 0 1 2 --out vanishing.csv
"""

import argparse
import csv
import logging

import numpy as np

from poolinglab.experiments import SEEDS, threshold_ratio_run, vanishing_task

GRID = [("last", "high"), ("last", "low"), ("mean", "high"), ("max", "high"), ("attention", "high"),
        ("max_attention", "high")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--length", type=int, default=200)
    ap.add_argument("--out", default="vanishing.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    task = vanishing_task()
    task.length = args.length
    splits = task.build()
    rows = []
    for pooling, mode in GRID:
        for seed in args.seeds:
            r = threshold_ratio_run(pooling, mode, seed, task, splits)
            rows.append({"pooling": pooling, "forget_bias": mode, "seed": seed,
                         "threshold_examples": r.report.threshold_examples, "ratio": r.report.threshold_ratio,
                         "test_acc": r.test_acc})
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for pooling, mode in GRID:
        ratios = [r["ratio"] for r in rows if (r["pooling"], r["forget_bias"]) == (pooling, mode)]
        ratios = [np.nan if x is None else x for x in ratios]
        print(f"{pooling:>14s} {mode:>4s}  mean ratio {np.mean(ratios):.3g}")


if __name__ == "__main__":
    main()
