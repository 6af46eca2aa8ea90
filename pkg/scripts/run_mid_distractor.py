"""Train on the mid-distractor task and report test accuracy and NWI peaks.

    python3 scripts/run_mid_distractor.py --poolings last max_attention --seeds 0 1
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from poolinglab.diagnostics import write_curve_csv
from poolinglab.experiments import SEEDS, desk_config, mid_distractor_task, nwi_for_task, train_on_task


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--poolings", nargs="+", default=["last", "max_attention", "max", "attention"])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--nwi-limit", type=int, default=80, help="test examples per model for NWI (0 skips NWI)")
    ap.add_argument("--out", default="mid_distractor")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = mid_distractor_task()
    splits = task.build()
    for pooling in args.poolings:
        accs, curves = [], []
        for seed in args.seeds:
            r = train_on_task(task, desk_config(pooling, seed, epochs=args.epochs), splits)
            accs.append(r.test_acc)
            if args.nwi_limit:
                curves.append(nwi_for_task(r.model, splits[2], k=5, limit=args.nwi_limit).curve)
        line = f"{pooling:>14s}  test acc {np.mean(accs):.3f} (std {np.std(accs):.3f})"
        if curves:
            curve = np.mean(curves, axis=0)
            write_curve_csv(out / f"nwi_{pooling}.csv", curve, {"model": pooling, "k": 5,
                                                                "seeds": len(args.seeds)})
            line += f"  NWI argmax {int(np.argmax(curve))}  c0/c50/c99 {curve[0]:.2f}/{curve[50]:.2f}/{curve[99]:.2f}"
        print(line)


if __name__ == "__main__":
    main()
