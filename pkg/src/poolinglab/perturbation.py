"""Distractor appending and occlusion-based Normalized Word Importance (NWI)."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import UNK, Corpus, Example
from .diagnostics import PROFILE_LEN, lin_interp
from .training import Predictor


class Position(str, enum.Enum):
    """Where the original text sits in the perturbed example."""

    LEFT = "left"
    MID = "mid"
    RIGHT = "right"


@dataclass
class PerturbSpec:
    position: Position | str
    wiki_fraction: float
    distractor_source: Sequence[np.ndarray] = ()

    def __post_init__(self):
        self.position = Position(self.position)
        if not 0.0 <= self.wiki_fraction < 1.0:
            raise ValueError("wiki_fraction must lie in [0, 1)")

    def echo(self) -> dict:
        return {"position": self.position.value, "wiki_fraction": self.wiki_fraction,
                "pool_sentences": len(self.distractor_source)}


def distractor_count(n: int, wiki_fraction: float) -> int:
    return int(round(n / (1.0 - wiki_fraction))) - n


def draw_distractors(pool: Sequence[np.ndarray], count: int, rng: np.random.Generator) -> np.ndarray:
    """Concatenate randomly chosen whole sentences, cut to exactly ``count`` tokens."""
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    if not pool:
        raise ValueError("distractor pool is empty")
    chunks, total = [], 0
    while total < count:
        s = pool[int(rng.integers(len(pool)))]
        chunks.append(s)
        total += len(s)
    return np.concatenate(chunks)[:count].astype(np.int64)


def append_distractor(tokens: np.ndarray, spec: PerturbSpec, rng: np.random.Generator) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot perturb an empty example")
    w = distractor_count(n, spec.wiki_fraction)
    if w == 0:
        return tokens.copy()
    if spec.position is Position.LEFT:
        return np.concatenate([tokens, draw_distractors(spec.distractor_source, w, rng)])
    if spec.position is Position.RIGHT:
        return np.concatenate([draw_distractors(spec.distractor_source, w, rng), tokens])
    left = draw_distractors(spec.distractor_source, (w + 1) // 2, rng)
    right = draw_distractors(spec.distractor_source, w // 2, rng)
    return np.concatenate([left, tokens, right])


def build_perturbed_dataset(corpus: Corpus, spec: PerturbSpec, rng_seed: int = 0) -> Corpus:
    """Apply :func:`append_distractor` to every example; labels are kept.

    Provenance (spec echo and seed) is stored in ``meta["perturbation"]``.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(rng_seed)
    examples = [Example(append_distractor(ex.ids, spec, rng), ex.label) for ex in corpus.examples]
    out = corpus.with_examples(examples, perturbation={**spec.echo(), "seed": rng_seed})
    out.meta.pop("keyword_positions", None)
    return out


# ---------------------------------------------------------------------------
# NWI


@dataclass
class NwiConfig:
    k: int = 5
    length_bucket: tuple[int, int] = (400, 500)
    unk_id: int = UNK

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        lo, hi = self.length_bucket
        if lo > hi:
            raise ValueError(f"empty length bucket {self.length_bucket}")


@dataclass
class NwiProfile:
    curve: np.ndarray
    examples_used: int


def occlusion_deltas(model: Predictor, ids: np.ndarray, label: int, k: int, unk_id: int = UNK,
                     chunk: int = 32) -> np.ndarray:
    """``|log P(y | s with window t replaced by UNK) - log P(y | s)|`` for t = 0..n//k - 1.

    A trailing remainder of ``n % k`` tokens is never occluded.
    """
    ids = np.asarray(ids)
    n = len(ids)
    windows = n // k
    variants = np.repeat(ids[None, :], windows + 1, axis=0)
    for t in range(windows):
        variants[t + 1, k * t:k * t + k] = unk_id
    logp = np.concatenate([
        model.log_probs(v, np.ones_like(v, dtype=bool))[:, label]
        for v in np.array_split(variants, range(chunk, len(variants), chunk))
    ])
    deltas = np.abs(logp[1:] - logp[0])
    # a window that was already all-UNK leaves the input unchanged
    deltas[np.all(variants[1:] == ids, axis=1)] = 0.0
    return deltas


def normalize_importance(deltas: np.ndarray) -> np.ndarray:
    """Divide by the max, then subtract the min of the divided series; all-zero stays zero."""
    deltas = np.asarray(deltas, dtype=np.float64)
    top = deltas.max()
    if top <= 0.0:
        return np.zeros_like(deltas)
    scaled = deltas / top
    return scaled - scaled.min()


def nwi_evaluate(model: Predictor, test_set: Corpus, cfg: NwiConfig) -> NwiProfile:
    lo, hi = cfg.length_bucket
    chosen = [ex for ex in test_set.examples if lo <= len(ex) <= hi and len(ex) >= cfg.k]
    if not chosen:
        raise ValueError(f"no test example with length in {cfg.length_bucket} (and >= k={cfg.k})")
    total = np.zeros(PROFILE_LEN)
    for ex in chosen:
        nwi = normalize_importance(occlusion_deltas(model, ex.ids, ex.label, cfg.k, cfg.unk_id))
        total += lin_interp(nwi)
    return NwiProfile(total / len(chosen), len(chosen))


def default_sweep_fractions() -> list[float]:
    return [0.0, 1 / 3, 0.5, 2 / 3, 0.75]

