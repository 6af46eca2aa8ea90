"""Corpora, vocabulary, embeddings, batching and the planted-keyword task."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"


class CorpusError(ValueError):
    pass


@dataclass
class RawExample:
    tokens: list[str]
    label: int


@dataclass
class Vocabulary:
    itos: list[str]
    max_size: int | None = None
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.itos[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("ids 0 and 1 are reserved for <pad> and <unk>")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]


@dataclass
class Example:
    ids: np.ndarray
    label: int

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Corpus:
    examples: list[Example]
    vocab: Vocabulary
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples])

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.examples[i] for i in indices], self.vocab, self.num_classes, dict(self.meta))

    def with_examples(self, examples: list[Example], **meta) -> "Corpus":
        return Corpus(examples, self.vocab, self.num_classes, {**self.meta, **meta})


# ---------------------------------------------------------------------------
# text files


def load_tsv(path: str | Path) -> list[RawExample]:
    """Read ``label<TAB>text`` lines; text is lowercased and split on whitespace."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    out, bad = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                bad.append(f"line {lineno}: missing TAB separator")
                continue
            try:
                lab = int(label)
            except ValueError:
                bad.append(f"line {lineno}: unparseable label {label!r}")
                continue
            if lab < 0:
                bad.append(f"line {lineno}: negative label {lab}")
                continue
            out.append(RawExample(text.lower().split(), lab))
    if bad:
        raise CorpusError(f"{path}: {len(bad)} malformed line(s): " + "; ".join(bad[:10]))
    if not out:
        raise CorpusError(f"{path}: empty corpus")
    return out


def save_tsv(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            fh.write(f"{ex.label}\t{' '.join(corpus.vocab.decode(ex.ids))}\n")


def load_sentences(path: str | Path) -> list[list[str]]:
    """One sentence per line, lowercased, whitespace-tokenised; blank lines skipped."""
    with open(path, encoding="utf-8") as fh:
        sents = [line.lower().split() for line in fh]
    sents = [s for s in sents if s]
    if not sents:
        raise CorpusError(f"{path}: no sentences")
    return sents


def build_vocab(raw: Sequence[RawExample], max_size: int = 25000) -> Vocabulary:
    """Most frequent tokens first (ties broken lexicographically), capped at ``max_size`` ids."""
    if not raw:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    if max_size < 2:
        raise ValueError("max_size must leave room for <pad> and <unk>")
    counts = Counter(tok for ex in raw for tok in ex.tokens)
    counts.pop(PAD_TOKEN, None)
    counts.pop(UNK_TOKEN, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + [t for t, _ in ranked[: max_size - 2]], max_size)


def encode(raw: Sequence[RawExample], vocab: Vocabulary, num_classes: int | None = None) -> Corpus:
    labels = [ex.label for ex in raw]
    k = max(labels) + 1 if num_classes is None else num_classes
    if max(labels) >= k:
        raise CorpusError(f"label {max(labels)} out of range for {k} classes")
    return Corpus([Example(vocab.encode(ex.tokens), ex.label) for ex in raw], vocab, k)


def filter_by_length(raw: Sequence[RawExample], min_len: int | None = None,
                     max_len: int | None = None) -> list[RawExample]:
    """Keep examples with ``min_len <= len(tokens) <= max_len`` (either bound optional)."""
    if min_len is not None and max_len is not None and min_len > max_len:
        raise ValueError(f"min_len {min_len} > max_len {max_len}")
    lo = 0 if min_len is None else min_len
    hi = math.inf if max_len is None else max_len
    kept = [ex for ex in raw if lo <= len(ex.tokens) <= hi]
    if not kept:
        raise CorpusError(f"length filter [{min_len}, {max_len}] removed all {len(raw)} examples")
    return kept


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    hits: int
    misses: int

    @property
    def coverage(self) -> float:
        return self.hits / max(1, self.hits + self.misses)


def random_embeddings(vocab_size: int, embed_dim: int, rng: np.random.Generator) -> np.ndarray:
    bound = 0.5 / embed_dim
    return rng.uniform(-bound, bound, size=(vocab_size, embed_dim))


def load_pretrained_embeddings(path: str | Path, vocab: Vocabulary, embed_dim: int,
                               seed: int = 0) -> EmbeddingMatrix:
    """GloVe-style text file (``token v1 ... vd``); rows for unseen tokens stay random."""
    values = random_embeddings(len(vocab), embed_dim, np.random.default_rng(seed))
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if len(parts) - 1 != embed_dim:
                raise ValueError(f"{path}:{lineno}: vector has {len(parts) - 1} dims, expected {embed_dim}")
            idx = vocab.stoi.get(parts[0])
            if idx is None or idx in (PAD, UNK):
                continue
            values[idx] = np.array(parts[1:], dtype=np.float64)
            found[idx] = True
    hits = int(found[2:].sum())
    return EmbeddingMatrix(values, hits, len(vocab) - 2 - hits)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def pad_batch(examples: Sequence[Example], batch_size: int = 32,
              order: Sequence[int] | None = None) -> list[Batch]:
    """Right-pad with PAD to the longest sequence of each batch."""
    if not examples:
        raise ValueError("no examples to batch")
    order = np.arange(len(examples)) if order is None else np.asarray(order)
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        rows = [examples[i].ids for i in idx]
        n = max(len(r) for r in rows)
        ids = np.full((len(rows), n), PAD, dtype=np.int64)
        mask = np.zeros((len(rows), n), dtype=bool)
        for b, r in enumerate(rows):
            ids[b, :len(r)] = r
            mask[b, :len(r)] = True
        labels = np.array([examples[i].label for i in idx], dtype=np.int64)
        batches.append(Batch(ids, mask, labels, idx))
    return batches


# ---------------------------------------------------------------------------
# planted-keyword task


def synthetic_vocab(num_classes: int, vocab_size: int) -> Vocabulary:
    if vocab_size < 2 + num_classes + 1:
        raise ValueError(f"vocab_size {vocab_size} too small for {num_classes} keywords plus filler")
    filler = vocab_size - 2 - num_classes
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + [f"kw{c}" for c in range(num_classes)]
                      + [f"w{j}" for j in range(filler)])


def synthetic_generator(num_examples: int, length: int, keyword_relative_pos: float, num_classes: int = 2,
                        vocab_size: int = 1000, rng_seed: int = 0, jitter: float = 0.02) -> Corpus:
    """Uniform filler with one class keyword planted near ``keyword_relative_pos``.

    The keyword for class ``c`` is token ``kw{c}``; it lands at
    ``floor(pos * (length - 1))`` shifted by a uniform integer in
    ``[-round(jitter * length), +round(jitter * length)]`` and clipped to the
    sequence.  Filler never contains a keyword, so the label is fully
    determined by the keyword.
    """
    if not 0.0 <= keyword_relative_pos <= 1.0:
        raise ValueError("keyword_relative_pos must lie in [0, 1]")
    if length < 1:
        raise ValueError("length must be positive")
    vocab = synthetic_vocab(num_classes, vocab_size)
    rng = np.random.default_rng(rng_seed)
    first_filler = 2 + num_classes
    centre = int(math.floor(keyword_relative_pos * (length - 1)))
    spread = int(round(jitter * length))
    ids = rng.integers(first_filler, vocab_size, size=(num_examples, length))
    labels = rng.integers(0, num_classes, size=num_examples)
    offsets = rng.integers(-spread, spread + 1, size=num_examples)
    positions = np.clip(centre + offsets, 0, length - 1)
    ids[np.arange(num_examples), positions] = 2 + labels
    examples = [Example(ids[i], int(labels[i])) for i in range(num_examples)]
    meta = {"keyword_positions": positions, "generator": {
        "num_examples": num_examples, "length": length, "keyword_relative_pos": keyword_relative_pos,
        "num_classes": num_classes, "vocab_size": vocab_size, "rng_seed": rng_seed, "jitter": jitter}}
    return Corpus(examples, vocab, num_classes, meta)


def synthetic_distractor_pool(vocab: Vocabulary, num_sentences: int = 2000, min_len: int = 8,
                              max_len: int = 25, rng_seed: int = 0) -> list[np.ndarray]:
    """Filler-only sentences: the stand-in for unrelated encyclopedic text."""
    first_filler = next(i for i, t in enumerate(vocab.itos) if i >= 2 and not t.startswith("kw"))
    rng = np.random.default_rng(rng_seed)
    lens = rng.integers(min_len, max_len + 1, size=num_sentences)
    return [rng.integers(first_filler, len(vocab), size=k) for k in lens]


def majority_baseline(corpus: Corpus) -> float:
    counts = np.bincount(corpus.labels, minlength=corpus.num_classes)
    return float(counts.max() / counts.sum())
