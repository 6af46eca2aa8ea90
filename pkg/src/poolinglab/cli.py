"""Command-line front end: ``poolinglab <command> --config exp.json --out DIR``.

Commands
  synth    write the configured synthetic task as TSV files plus a distractor pool
  perturb  write distractor-appended copies of the configured splits
  train    one run directory per (pooling, seed): report, checkpoint, CSVs
  nwi      NWI curve for every trained run of the config
  sweep    test-time distractor sweep for every trained run of the config
  report   mean +- std summary over all run directories under --out

Exit status is 0 on success, 2 for configuration errors (nothing is written)
and 3 for runtime errors (the affected directory gets a ``FAILED`` marker).
Every directory that completes gets a ``manifest.json`` listing its artifacts
with sha256 hashes; ``report`` checks them before reading anything.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, setting_of
from .data import (
    Corpus,
    Vocabulary,
    build_vocab,
    encode,
    filter_by_length,
    load_pretrained_embeddings,
    load_sentences,
    load_tsv,
    save_tsv,
)
from .diagnostics import ProfileAccumulator, write_curve_csv, write_profile_csv, write_ratio_csv
from .experiments import distractor_sweep
from .perturbation import PerturbSpec, build_perturbed_dataset, nwi_evaluate
from .training import ClassifierModel, evaluate_accuracy, train

log = logging.getLogger("poolinglab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEP_COLUMNS = ("pooling", "seed", "position", "fraction", "accuracy")
SUMMARY_COLUMNS = ("pooling", "setting", "runs", "test_acc_mean", "test_acc_std", "valid_acc_mean",
                   "valid_acc_std", "threshold_ratio_mean", "threshold_ratio_std")


# ---------------------------------------------------------------------------
# artifact plumbing


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_atomic(path: Path, writer: Callable[[Path], None]) -> None:
    """Run ``writer`` on a temporary sibling and move it into place."""
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def write_text_atomic(path: Path, text: str) -> None:
    write_atomic(path, lambda p: p.write_text(text, encoding="utf-8"))


def write_manifest(directory: Path, kind: str, config: ExperimentConfig, artifacts: list[str], **info) -> None:
    manifest = {"kind": kind, "config": config.to_dict(), "setting": config.name,
                "artifacts": {name: sha256(directory / name) for name in sorted(artifacts)}, **info}
    write_text_atomic(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    (directory / "FAILED").unlink(missing_ok=True)


def mark_failed(directory: Path, err: BaseException) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "FAILED").write_text("".join(traceback.format_exception(err)), encoding="utf-8")


def read_manifest(directory: Path, verify: bool = True) -> dict:
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if verify:
        for name, digest in manifest["artifacts"].items():
            path = directory / name
            if not path.exists():
                raise RuntimeError(f"{directory}: artifact {name} listed in manifest is missing")
            if sha256(path) != digest:
                raise RuntimeError(f"{directory}: hash mismatch for {name}")
    return manifest


def run_dir(out: Path, pooling: str, seed: int) -> Path:
    return out / "runs" / f"{pooling}-seed{seed}"


# ---------------------------------------------------------------------------
# data


@dataclass
class Splits:
    train: Corpus
    valid: Corpus | None
    test: Corpus | None
    pool: list[np.ndarray]
    embeddings: np.ndarray | None = None


def _encode_sentences(sents: list[list[str]], vocab: Vocabulary) -> list[np.ndarray]:
    return [vocab.encode(s) for s in sents]


def load_splits(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    if d.synthetic is not None:
        train_set, valid_set, test_set = d.synthetic.build()
        return Splits(train_set, valid_set, test_set, d.synthetic.pool(train_set))
    raws = {k: filter_by_length(load_tsv(getattr(d, k)), d.min_len, d.max_len)
            for k in ("train", "valid", "test") if getattr(d, k) is not None}
    vocab = build_vocab(raws["train"], d.max_vocab)
    num_classes = max(ex.label for raw in raws.values() for ex in raw) + 1
    enc = {k: encode(raw, vocab, num_classes) for k, raw in raws.items()}
    pool = _encode_sentences(load_sentences(d.distractor_pool), vocab) if d.distractor_pool else []
    emb = None
    if d.embeddings:
        embed_dim = cfg.train_config(cfg.poolings[0], cfg.seeds[0]).embed_dim
        matrix = load_pretrained_embeddings(d.embeddings, vocab, embed_dim, seed=0)
        log.info("pretrained embedding coverage %.1f%%", 100 * matrix.coverage)
        emb = matrix.values
    return Splits(enc["train"], enc.get("valid"), enc.get("test"), pool, emb)


def _need_pool(splits: Splits) -> list[np.ndarray]:
    if not splits.pool:
        raise ConfigError("this command needs a distractor pool (data.distractor_pool or a synthetic task)")
    return splits.pool


def _need_test(splits: Splits) -> Corpus:
    if splits.test is None:
        raise ConfigError("this command needs a test split (data.test or a synthetic task)")
    return splits.test


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    if cfg.data.synthetic is None:
        raise ConfigError("synth needs data.synthetic")
    target = out / "synthetic"
    target.mkdir(parents=True, exist_ok=True)
    try:
        splits = load_splits(cfg)
        names = []
        for split in ("train", "valid", "test"):
            name = f"{split}.tsv"
            write_atomic(target / name, lambda p, c=getattr(splits, split): save_tsv(c, p))
            names.append(name)
        vocab = splits.train.vocab
        write_text_atomic(target / "pool.txt", "".join(" ".join(vocab.decode(s)) + "\n" for s in splits.pool))
        write_manifest(target, "synthetic", cfg, names + ["pool.txt"])
    except Exception as e:
        mark_failed(target, e)
        raise


def cmd_perturb(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    splits = load_splits(cfg)
    spec = PerturbSpec(cfg.perturb.position, cfg.perturb.wiki_fraction, _need_pool(splits))
    for split in cfg.perturb.splits:
        if getattr(splits, split) is None:
            raise ConfigError(f"perturb.splits names {split!r} but no such split is configured")
    target = out / "perturbed"
    target.mkdir(parents=True, exist_ok=True)
    try:
        names, provenance = [], {}
        for k, split in enumerate(cfg.perturb.splits):
            perturbed = build_perturbed_dataset(getattr(splits, split), spec, rng_seed=cfg.perturb.seed + k)
            write_atomic(target / f"{split}.tsv", lambda p, c=perturbed: save_tsv(c, p))
            names.append(f"{split}.tsv")
            provenance[split] = perturbed.meta["perturbation"]
        write_text_atomic(target / "provenance.json", json.dumps(provenance, indent=2, sort_keys=True))
        write_manifest(target, "perturbed", cfg, names + ["provenance.json"])
    except Exception as e:
        mark_failed(target, e)
        raise


def train_one(cfg: ExperimentConfig, pooling: str, seed: int, out: Path) -> dict:
    """Train a single (pooling, seed) run and write its directory."""
    directory = run_dir(out, pooling, seed)
    directory.mkdir(parents=True, exist_ok=True)
    try:
        splits = load_splits(cfg)
        tc = cfg.train_config(pooling, seed)
        model = ClassifierModel.from_config(tc, len(splits.train.vocab), splits.train.num_classes, splits.embeddings)
        acc = ProfileAccumulator(tc.profile_examples)
        report = train(model, tc, splits.train, splits.valid, hooks=[lambda ctx: acc.add(ctx.norms)])
        if splits.test is not None:
            report.test_acc = evaluate_accuracy(model, splits.test)
        names = ["checkpoint.bin", "vocab.txt", "ratios.csv", "report.json"]
        write_atomic(directory / "checkpoint.bin", lambda p: model.save(p, seed=seed, setting=cfg.name))
        write_text_atomic(directory / "vocab.txt", "\n".join(splits.train.vocab.itos) + "\n")
        write_atomic(directory / "ratios.csv", lambda p: write_ratio_csv(p, report.ratios))
        if acc.count:
            write_atomic(directory / "profile.csv",
                         lambda p: write_profile_csv(p, acc.profile(), model=pooling, seed=seed))
            names.append("profile.csv")
        body = report.to_dict()
        body["experiment"] = cfg.to_dict()
        write_text_atomic(directory / "report.json", json.dumps(body, indent=2, sort_keys=True, default=float))
        write_manifest(directory, "train-run", cfg, names, pooling=pooling, seed=seed)
        log.info("%s: best valid %.3f test %s", directory.name, report.best_valid_acc, report.test_acc)
        return {"pooling": pooling, "seed": seed, "test_acc": report.test_acc}
    except Exception as e:
        mark_failed(directory, e)
        raise


def _fan_out(fn, tasks: list[tuple], jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def cmd_train(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    _fan_out(train_one, [(cfg, p, s, out) for p in cfg.poolings for s in cfg.seeds], jobs)


def _trained_runs(cfg: ExperimentConfig, out: Path) -> list[tuple[str, int, Path]]:
    runs = []
    for p in cfg.poolings:
        for s in cfg.seeds:
            d = run_dir(out, p, s)
            if not (d / "manifest.json").exists():
                raise RuntimeError(f"{d}: no completed training run; run `train` with this config first")
            read_manifest(d)
            runs.append((p, s, d))
    return runs


def _load_run_model(directory: Path, splits: Splits) -> ClassifierModel:
    itos = (directory / "vocab.txt").read_text(encoding="utf-8").splitlines()
    if itos != splits.train.vocab.itos:
        raise RuntimeError(f"{directory}: vocabulary differs from the configured data")
    return ClassifierModel.load(directory / "checkpoint.bin")


def _add_artifact(directory: Path, name: str) -> None:
    manifest = read_manifest(directory)
    manifest["artifacts"][name] = sha256(directory / name)
    write_text_atomic(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def nwi_one(cfg: ExperimentConfig, pooling: str, seed: int, directory: Path) -> None:
    try:
        splits = load_splits(cfg)
        test = _need_test(splits)
        if cfg.nwi.limit:
            test = test.with_examples(test.examples[:cfg.nwi.limit])
        nwi_cfg = cfg.nwi_config()
        prof = nwi_evaluate(_load_run_model(directory, splits), test, nwi_cfg)
        meta = {"model": pooling, "seed": seed, "k": nwi_cfg.k, "bucket": f"{nwi_cfg.length_bucket[0]}-"
                f"{nwi_cfg.length_bucket[1]}", "examples_used": prof.examples_used}
        write_atomic(directory / "nwi.csv", lambda p: write_curve_csv(p, prof.curve, meta))
        _add_artifact(directory, "nwi.csv")
    except Exception as e:
        mark_failed(directory, e)
        raise


def cmd_nwi(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    _fan_out(nwi_one, [(cfg, p, s, d) for p, s, d in _trained_runs(cfg, out)], jobs)


def sweep_one(cfg: ExperimentConfig, pooling: str, seed: int, directory: Path) -> list[dict]:
    try:
        splits = load_splits(cfg)
        rows = distractor_sweep(_load_run_model(directory, splits), _need_test(splits), _need_pool(splits),
                                cfg.sweep.fractions, cfg.sweep.positions, cfg.sweep.seed)
        rows = [{"pooling": pooling, "seed": seed, **r} for r in rows]
        write_atomic(directory / "sweep.csv", lambda p: write_sweep_csv(p, rows))
        _add_artifact(directory, "sweep.csv")
        return rows
    except Exception as e:
        mark_failed(directory, e)
        raise


def cmd_sweep(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    per_run = _fan_out(sweep_one, [(cfg, p, s, d) for p, s, d in _trained_runs(cfg, out)], jobs)
    target = out / "sweep"
    target.mkdir(parents=True, exist_ok=True)
    write_atomic(target / "sweep.csv", lambda p: write_sweep_csv(p, [r for rows in per_run for r in rows]))
    write_manifest(target, "sweep", cfg, ["sweep.csv"])


def write_sweep_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["pooling"], r["seed"], r["position"], repr(float(r["fraction"])),
                        repr(float(r["accuracy"]))])


def read_sweep_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != SWEEP_COLUMNS:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [{"pooling": r[0], "seed": int(r[1]), "position": r[2], "fraction": float(r[3]),
             "accuracy": float(r[4])} for r in rows[1:]]


# ---------------------------------------------------------------------------
# report


def _mean_std(values: list[float]) -> tuple[float, float]:
    vals = [v for v in values if v is not None]
    if not vals:
        return float("nan"), float("nan")
    return float(np.mean(vals)), float(np.std(vals))


def _diff_keys(a: dict, b: dict, prefix: str = "") -> list[str]:
    keys = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            keys += _diff_keys(va, vb, f"{prefix}{k}.")
        elif va != vb:
            keys.append(f"{prefix}{k}")
    return keys


def collect_runs(out: Path) -> list[dict]:
    runs = []
    for manifest_path in sorted(out.glob("**/manifest.json")):
        manifest = read_manifest(manifest_path.parent)
        if manifest["kind"] != "train-run":
            continue
        report = json.loads((manifest_path.parent / "report.json").read_text(encoding="utf-8"))
        runs.append({"manifest": manifest, "report": report, "dir": manifest_path.parent})
    return runs


def summarize(out: Path) -> list[dict]:
    runs = collect_runs(out)
    if not runs:
        raise RuntimeError(f"{out}: no completed training runs found")
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in runs:
        groups.setdefault((r["manifest"]["pooling"], r["manifest"]["setting"]), []).append(r)
    rows = []
    for (pooling, setting), members in sorted(groups.items()):
        ref = members[0]
        ref_setting = setting_of(ref["manifest"]["config"])
        conflicts = set()
        for m in members[1:]:
            conflicts.update(_diff_keys(ref_setting, setting_of(m["manifest"]["config"])))
        if conflicts:
            raise ConfigError(f"runs for ({pooling}, {setting}) were produced by different configs; "
                              f"conflicting keys: {sorted(conflicts)}")
        seeds = [m["manifest"]["seed"] for m in members]
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"runs for ({pooling}, {setting}) repeat seeds {sorted(seeds)}")
        test = _mean_std([m["report"].get("test_acc") for m in members])
        valid = _mean_std([m["report"].get("best_valid_acc") for m in members])
        ratio = _mean_std([m["report"].get("threshold_ratio") for m in members])
        rows.append({"pooling": pooling, "setting": setting, "runs": len(members),
                     "test_acc_mean": test[0], "test_acc_std": test[1],
                     "valid_acc_mean": valid[0], "valid_acc_std": valid[1],
                     "threshold_ratio_mean": ratio[0], "threshold_ratio_std": ratio[1]})
    return rows


def cmd_report(cfg: ExperimentConfig | None, out: Path, jobs: int) -> None:
    rows = summarize(out)
    with open(out / "summary.csv.tmp", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    os.replace(out / "summary.csv.tmp", out / "summary.csv")
    print(f"{'pooling':<14} {'setting':<20} {'runs':>4}  {'test acc':>15}  {'threshold ratio':>21}")
    for r in rows:
        print(f"{r['pooling']:<14} {r['setting']:<20} {r['runs']:>4}  "
              f"{100 * r['test_acc_mean']:6.2f} +- {100 * r['test_acc_std']:5.2f}  "
              f"{r['threshold_ratio_mean']:10.3g} +- {r['threshold_ratio_std']:8.2g}")


COMMANDS = {"synth": cmd_synth, "perturb": cmd_perturb, "train": cmd_train, "nwi": cmd_nwi,
            "sweep": cmd_sweep, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poolinglab", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="experiment JSON file (optional for report)")
    parser.add_argument("--out", type=Path, help="output directory (overrides the config's 'out')")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for multi-run commands")
    parser.add_argument("--seed-override", type=int, help="replace the config's seed list with this seed")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = None
        if args.config is not None:
            cfg = load_config(args.config)
            if args.seed_override is not None:
                cfg = dataclasses.replace(cfg, seeds=[args.seed_override])
        elif args.command != "report":
            raise ConfigError(f"{args.command} needs --config")
        out = args.out or (Path(cfg.out) if cfg else None)
        if out is None:
            raise ConfigError("report needs --out or --config")
        if args.command == "report" and not out.is_dir():
            raise ConfigError(f"{out}: no such directory")
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args.jobs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any failure inside a command is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
