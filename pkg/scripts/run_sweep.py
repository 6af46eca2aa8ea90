"""Train on the clean task, then append test-time distractors at growing fractions.

    python3 scripts/run_sweep.py --positions mid left right
"""

import argparse
import logging

import numpy as np

from poolinglab.cli import write_sweep_csv
from poolinglab.experiments import SEEDS, clean_task, desk_config, distractor_sweep, train_on_task
from poolinglab.perturbation import default_sweep_fractions


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--poolings", nargs="+", default=["last", "max_attention"])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--positions", nargs="+", default=["mid"])
    ap.add_argument("--fractions", type=float, nargs="+", default=default_sweep_fractions())
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    task = clean_task()
    train_set, valid_set, test_set = splits = task.build()
    pool = task.pool(train_set)
    rows = []
    for pooling in args.poolings:
        for seed in args.seeds:
            r = train_on_task(task, desk_config(pooling, seed), splits)
            for row in distractor_sweep(r.model, test_set, pool, args.fractions, args.positions, seed=0):
                rows.append({"pooling": pooling, "seed": seed, **row})
    write_sweep_csv(args.out, rows)
    for pooling in args.poolings:
        for position in args.positions:
            accs = [np.mean([r["accuracy"] for r in rows if (r["pooling"], r["position"], r["fraction"])
                             == (pooling, position, f)]) for f in args.fractions]
            print(f"{pooling:>14s} {position:>5s}  " + "  ".join(f"{a:.3f}" for a in accs))


if __name__ == "__main__":
    main()
