"""Acceptance run: one test per criterion, each printing a single PASS/FAIL line.

The desk-scale training runs are shared through module-scoped fixtures, so
criteria 4 and 5 reuse the same mid-distractor models. Budget about 45 minutes
on one core. Accuracy and ratio thresholds are checked on the mean over the
five seeds; per-seed values are printed alongside.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from poolinglab.cli import EXIT_OK, main
from poolinglab.diagnostics import aggregate_profiles
from poolinglab.experiments import (
    SEEDS,
    clean_task,
    desk_config,
    distractor_sweep,
    mid_distractor_task,
    nwi_for_task,
    threshold_ratio_run,
    train_on_task,
    vanishing_task,
)
from poolinglab.perturbation import NwiConfig, nwi_evaluate

from oracles import (
    NWI_EXAMPLES,
    NWI_WEIGHTS,
    PRIMITIVES,
    BagOfWords,
    hand_nwi_curve,
    lstm_cell_fd,
    pooling_property_failures,
    primitive_fd,
    vocab_corpus,
)

POOLED = ("mean", "max", "attention", "max_attention")
NWI_LIMIT = 80  # test examples per model; 20 models must fit the 5 minute budget


def verdict(log: list[str], n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    assert ok, line


def fmt(values) -> str:
    return "[" + ", ".join(f"{v:.3g}" for v in values) + "]"


# ---------------------------------------------------------------------------
# shared training runs


@pytest.fixture(scope="module")
def vanishing_runs():
    """Threshold runs keyed by (pooling, forget bias mode); value is (results, seconds)."""
    splits = vanishing_task().build()
    grid = [("last", "high"), ("last", "low")] + [(p, "high") for p in POOLED]
    runs = {}
    for pooling, mode in grid:
        t0 = time.perf_counter()
        results = [threshold_ratio_run(pooling, mode, s, splits=splits) for s in SEEDS]
        runs[pooling, mode] = (results, time.perf_counter() - t0)
    return runs


@pytest.fixture(scope="module")
def mid_runs():
    task = mid_distractor_task()
    splits = task.build()
    runs = {}
    for pooling in ("last", "max_attention", "max", "attention"):
        t0 = time.perf_counter()
        results = [train_on_task(task, desk_config(pooling, s), splits) for s in SEEDS]
        runs[pooling] = (results, time.perf_counter() - t0)
    return splits, runs


@pytest.fixture(scope="module")
def clean_runs():
    task = clean_task()
    splits = task.build()
    runs = {p: [train_on_task(task, desk_config(p, s), splits) for s in SEEDS] for p in ("last", "max_attention")}
    return task, splits, runs


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_gradient_correctness(verdicts):
    t0 = time.perf_counter()
    reports = {name: primitive_fd(name, 20) for name in sorted(PRIMITIVES)}
    reports["lstm_cell"] = lstm_cell_fd(20)
    failed = [name for name, reps in reports.items() if not all(r.passed for r in reps)]
    worst = max(r.max_error for reps in reports.values() for r in reps)
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 60
    verdict(verdicts, 1, ok, f"{len(PRIMITIVES)} primitives + LSTM cell x 20 instances, failing={failed}, "
                             f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_pooling_algebra(verdicts):
    t0 = time.perf_counter()
    failures = {seed: f for seed in range(100) if (f := pooling_property_failures(seed))}
    elapsed = time.perf_counter() - t0
    verdict(verdicts, 2, not failures and elapsed < 60,
            f"100 instances, failing seeds={sorted(failures)[:5]}, {elapsed:.1f}s")


def test_criterion_3_vanishing_ratio(verdicts, vanishing_runs):
    checks = {("last", "high"): lambda r: r < 0.1, ("last", "low"): lambda r: r < 1e-2}
    parts, ok = [], True
    for (pooling, mode), (results, seconds) in vanishing_runs.items():
        ratios = [r.report.threshold_ratio for r in results]
        reached = all(r is not None for r in ratios)
        mean = float(np.mean(ratios)) if reached else float("nan")
        good = reached and checks.get((pooling, mode), lambda r: r > 0.2)(mean) and seconds < 600
        ok &= good
        label = pooling if mode == "high" else f"{pooling}-low"
        parts.append(f"{label} mean {mean:.3g} {fmt(ratios) if reached else ratios} ({seconds:.0f}s)")
    verdict(verdicts, 3, ok, "; ".join(parts))


@pytest.mark.parametrize("key", [("last", "low")] + [(p, "high") for p in POOLED], ids="-".join)
def test_gradient_profile_after_500_examples(vanishing_runs, key):
    # mid/end gap in the seed-averaged profile of the first 500 examples seen
    prof = aggregate_profiles([r.profile.norms for r in vanishing_runs[key][0]]).norms
    gaps = (prof[49] / prof[0], prof[49] / prof[99])
    print(f"{'-'.join(key)} mid/end {fmt(gaps)}")
    if key[0] == "last":
        assert max(gaps) <= 1e-3
    else:
        assert all(0.1 <= g <= 10 for g in gaps)


def test_criterion_4_mid_distractor_collapse(verdicts, mid_runs):
    _, runs = mid_runs
    bounds = {"last": lambda a: abs(a - 0.5) <= 0.07, "max_attention": lambda a: a >= 0.85,
              "max": lambda a: a >= 0.75, "attention": lambda a: a >= 0.75}
    parts, ok = [], True
    for pooling, (results, seconds) in runs.items():
        accs = [r.test_acc for r in results]
        mean = float(np.mean(accs))
        ok &= bounds[pooling](mean) and seconds < 900
        parts.append(f"{pooling} {mean:.3f} {fmt(accs)} ({seconds:.0f}s)")
    verdict(verdicts, 4, ok, "; ".join(parts))


def test_criterion_5_nwi_localization(verdicts, mid_runs):
    (_, _, test_set), runs = mid_runs
    t0 = time.perf_counter()
    curves = {p: np.mean([nwi_for_task(r.model, test_set, k=5, limit=NWI_LIMIT).curve for r in results], axis=0)
              for p, (results, _) in runs.items()}
    elapsed = time.perf_counter() - t0
    parts, ok = [], elapsed < 300
    for p, c in curves.items():
        if p == "last":
            good = c[50] < 0.2 * min(c[0], c[99])
            parts.append(f"last c50 {c[50]:.3f} vs ends {c[0]:.3f}/{c[99]:.3f}")
        else:
            peak = int(np.argmax(c))
            good = 40 <= peak <= 60
            parts.append(f"{p} argmax {peak}")
        ok &= good
    verdict(verdicts, 5, ok, "; ".join(parts) + f" ({elapsed:.0f}s)")


def test_criterion_6_test_time_sweep(verdicts, clean_runs):
    task, (train_set, _, test_set), runs = clean_runs
    pool = task.pool(train_set)
    t0 = time.perf_counter()
    drops = {}
    for p, results in runs.items():
        per_seed = []
        for r in results:
            rows = distractor_sweep(r.model, test_set, pool, (0.0, 1 / 3, 0.5, 2 / 3), ("mid",), seed=0)
            per_seed.append([row["accuracy"] for row in rows])
        drops[p] = np.mean(per_seed, axis=0)
    elapsed = time.perf_counter() - t0
    last_drop = 100 * (drops["last"][0] - drops["last"][-1])
    att_drop = 100 * (drops["max_attention"][0] - drops["max_attention"][-1])
    ok = last_drop > 25 and att_drop < 10 and elapsed < 300
    verdict(verdicts, 6, ok, f"last {fmt(drops['last'])} drop {last_drop:.1f} pts; max_attention "
                             f"{fmt(drops['max_attention'])} drop {att_drop:.1f} pts ({elapsed:.0f}s)")


def test_criterion_7_cli_determinism(verdicts, tmp_path):
    cfg = {"name": "determinism", "poolings": ["last", "mean", "max", "attention", "max_attention"],
           "seeds": [3],
           "data": {"synthetic": {"num_train": 200, "num_valid": 40, "num_test": 40, "length": 30,
                                  "vocab_size": 100}},
           "train": {"embed_dim": 8, "hidden_dim": 8, "epochs": 2}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    codes = [main(["train", "--config", str(path), "--out", str(tmp_path / o), "-q"]) for o in ("a", "b")]
    differing = []
    for pooling in cfg["poolings"]:
        for name in ("checkpoint.bin", "ratios.csv", "profile.csv", "vocab.txt"):
            a = (tmp_path / "a/runs" / f"{pooling}-seed3" / name).read_bytes()
            b = (tmp_path / "b/runs" / f"{pooling}-seed3" / name).read_bytes()
            if a != b:
                differing.append(f"{pooling}/{name}")
    verdict(verdicts, 7, codes == [EXIT_OK, EXIT_OK] and not differing,
            f"two train invocations x {len(cfg['poolings'])} poolings, exit codes {codes}, differing={differing}")


def test_criterion_8_nwi_fixture(verdicts):
    prof = nwi_evaluate(BagOfWords(np.array(NWI_WEIGHTS)), vocab_corpus(NWI_EXAMPLES),
                        NwiConfig(k=2, length_bucket=(10, 10)))
    err = float(np.max(np.abs(prof.curve - np.array(hand_nwi_curve(NWI_WEIGHTS, NWI_EXAMPLES, 2)))))
    verdict(verdicts, 8, err <= 1e-9 and prof.examples_used == 2, f"max abs deviation from scalar oracle {err:.1e}")
