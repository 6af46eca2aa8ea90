"""Desk-scale experiment runners on the planted-keyword task.

These compose the library pieces into the protocols used by the acceptance
suite, the scripts in ``scripts/`` and the CLI: threshold vanishing ratios,
train-time distractor datasets, test-time distractor sweeps and NWI curves.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, synthetic_distractor_pool, synthetic_generator
from .diagnostics import GradientProfile, ProfileAccumulator
from .perturbation import NwiConfig, NwiProfile, PerturbSpec, Position, build_perturbed_dataset, nwi_evaluate
from .training import BatchContext, ClassifierModel, TrainConfig, TrainReport, evaluate_accuracy, train

log = logging.getLogger(__name__)


@dataclass
class SyntheticTask:
    """Train/valid/test splits of the planted-keyword task, optionally with distractors."""

    num_train: int = 1000
    num_valid: int = 200
    num_test: int = 500
    length: int = 200
    keyword_pos: float = 0.5
    num_classes: int = 2
    vocab_size: int = 1000
    jitter: float = 0.02
    distractor_position: str | None = None
    distractor_fraction: float = 0.0
    data_seed: int = 0

    def pool(self, corpus: Corpus) -> list[np.ndarray]:
        return synthetic_distractor_pool(corpus.vocab, rng_seed=self.data_seed + 7)

    def build(self) -> tuple[Corpus, Corpus, Corpus]:
        s = self.data_seed
        splits = [synthetic_generator(n, self.length, self.keyword_pos, self.num_classes, self.vocab_size,
                                      rng_seed=s + 1000 * k, jitter=self.jitter)
                  for k, n in enumerate((self.num_train, self.num_valid, self.num_test))]
        if self.distractor_position is None or self.distractor_fraction == 0:
            return tuple(splits)
        spec = PerturbSpec(self.distractor_position, self.distractor_fraction, self.pool(splits[0]))
        return tuple(build_perturbed_dataset(c, spec, rng_seed=s + 13 + k) for k, c in enumerate(splits))


# Desk-scale protocol shared by the acceptance suite and scripts/
DESK_MODEL = {"embed_dim": 32, "hidden_dim": 64}
SEEDS = (0, 1, 2, 3, 4)


def vanishing_task() -> SyntheticTask:
    """Length 200, keyword centred, 1K training examples."""
    return SyntheticTask(length=200, keyword_pos=0.5)


def mid_distractor_task() -> SyntheticTask:
    """Length-50 documents padded to 150 tokens with mid distractors (two thirds of the result)."""
    return SyntheticTask(length=50, distractor_position="mid", distractor_fraction=2 / 3)


def clean_task() -> SyntheticTask:
    return SyntheticTask(length=50)


def desk_config(pooling: str, seed: int, **overrides) -> TrainConfig:
    kw = {**DESK_MODEL, "epochs": 10, **overrides}
    return TrainConfig(pooling=pooling, seed=seed, **kw)


@dataclass
class RunResult:
    pooling: str
    seed: int
    report: TrainReport
    test_acc: float | None
    model: ClassifierModel = field(repr=False)
    profile: GradientProfile | None = None


def train_on_task(task: SyntheticTask, config: TrainConfig, splits: tuple[Corpus, Corpus, Corpus] | None = None,
                  profile_examples: int | None = None) -> RunResult:
    train_set, valid_set, test_set = splits if splits is not None else task.build()
    model = ClassifierModel.from_config(config, len(train_set.vocab), train_set.num_classes)
    hooks = []
    acc = None
    if profile_examples:
        acc = ProfileAccumulator(profile_examples)

        def hook(ctx: BatchContext) -> None:
            acc.add(ctx.norms)

        hooks.append(hook)
    report = train(model, config, train_set, valid_set, hooks)
    test_acc = evaluate_accuracy(model, test_set) if len(test_set) else None
    report.test_acc = test_acc
    log.info("%s seed %d: threshold ratio %s test %s", config.pooling, config.seed, report.threshold_ratio, test_acc)
    return RunResult(config.pooling, config.seed, report, test_acc, model,
                     acc.profile() if acc is not None and acc.count else None)


def threshold_ratio_run(pooling: str, forget_bias_mode: str, seed: int, task: SyntheticTask | None = None,
                        splits: tuple[Corpus, Corpus, Corpus] | None = None, **overrides) -> RunResult:
    """Train until the running train accuracy first reaches 95% and keep the ratio there.

    Also records the gradient profile over the first ``profile_examples`` examples.
    """
    task = task or vanishing_task()
    kw = {**DESK_MODEL, "epochs": 20, **overrides}
    cfg = TrainConfig(pooling=pooling, forget_bias_mode=forget_bias_mode, seed=seed, stop_at_threshold=True, **kw)
    return train_on_task(task, cfg, splits, profile_examples=cfg.profile_examples)


def distractor_sweep(model: ClassifierModel, test_set: Corpus, pool: list[np.ndarray],
                     fractions=(0.0, 1 / 3, 0.5, 2 / 3), positions=("mid",), seed: int = 0) -> list[dict]:
    """Test-time appending: accuracy for every (position, fraction) pair."""
    rows = []
    for position in positions:
        for f in fractions:
            spec = PerturbSpec(Position(position), f, pool)
            perturbed = build_perturbed_dataset(test_set, spec, rng_seed=seed)
            rows.append({"position": spec.position.value, "fraction": f,
                         "accuracy": evaluate_accuracy(model, perturbed)})
    return rows


def nwi_for_task(model: ClassifierModel, test_set: Corpus, k: int = 5, limit: int | None = None) -> NwiProfile:
    """NWI over the test split with a bucket spanning its actual lengths."""
    examples = test_set.examples[:limit] if limit else test_set.examples
    lengths = [len(e) for e in examples]
    cfg = NwiConfig(k=k, length_bucket=(min(lengths), max(lengths)))
    return nwi_evaluate(model, test_set.with_examples(list(examples)), cfg)


def config_with(config: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(config, **changes)
