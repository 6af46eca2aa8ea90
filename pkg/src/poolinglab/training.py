"""BiLSTM text classifier (embedding -> BiLSTM -> pooling -> linear) and its Adam loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, Corpus, pad_batch, random_embeddings
from .diagnostics import RatioEntry, batch_vanishing_ratio, capture_grad_norms, mid_index
from .pooling import AttentionParams, PoolingKind, PooledEmbedding, pool
from .recurrent import BiLstmOutput, ForgetBias, bilstm_forward, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    pooling: str = "max_attention"
    embed_dim: int = 100
    hidden_dim: int = 256
    lr: float = 2e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    forget_bias_mode: str = "high"
    weight_decay: float = 0.0
    # diagnostics
    train_acc_threshold: float = 0.95
    stop_at_threshold: bool = False
    ratio_every: int = 64
    profile_examples: int = 500
    valid_fraction: float = 0.1

    def __post_init__(self):
        PoolingKind(self.pooling)
        ForgetBias(self.forget_bias_mode)
        if self.embed_dim < 1 or self.hidden_dim < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("dimensions, batch size and epochs must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


# ---------------------------------------------------------------------------
# model


class ClassifierModel:
    def __init__(self, vocab_size: int, num_classes: int, pooling: PoolingKind | str = "max_attention",
                 embed_dim: int = 100, hidden_dim: int = 256, forget_bias_mode: str = "high",
                 seed: int = 0, embeddings: np.ndarray | None = None):
        self.pooling = PoolingKind(pooling)
        self.vocab_size, self.num_classes = vocab_size, num_classes
        self.embed_dim, self.hidden_dim = embed_dim, hidden_dim
        self.forget_bias_mode = ForgetBias(forget_bias_mode).value
        rng = np.random.default_rng(seed)
        emb = random_embeddings(vocab_size, embed_dim, rng)
        if embeddings is not None:
            if embeddings.shape != emb.shape:
                raise ValueError(f"embedding matrix shape {embeddings.shape}, expected {emb.shape}")
            emb = np.array(embeddings, dtype=np.float64)
        self.embedding = Tensor(emb, requires_grad=True, name="embedding")
        self.fwd = init_params(embed_dim, hidden_dim, forget_bias_mode, rng, prefix="fwd.")
        self.bwd = init_params(embed_dim, hidden_dim, forget_bias_mode, rng, prefix="bwd.")
        self.attention = AttentionParams.init(2 * hidden_dim, rng) if self.pooling is PoolingKind.ATTENTION else None
        bound = np.sqrt(6.0 / (2 * hidden_dim + num_classes))
        self.W_out = Tensor(rng.uniform(-bound, bound, size=(2 * hidden_dim, num_classes)),
                            requires_grad=True, name="out.W")
        self.b_out = Tensor(np.zeros(num_classes), requires_grad=True, name="out.b")

    def parameters(self) -> dict[str, Tensor]:
        params = {"embedding": self.embedding}
        for p in (self.fwd, self.bwd):
            params.update({t.name: t for t in p.tensors().values()})
        if self.attention is not None:
            params["attn.q"] = self.attention.q
        params["out.W"] = self.W_out
        params["out.b"] = self.b_out
        return params

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> BiLstmOutput:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id out of range [0, {self.vocab_size})")
        return bilstm_forward(self.fwd, self.bwd, ad.embedding(self.embedding, ids), mask)

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, BiLstmOutput, PooledEmbedding]:
        out = self.encode(ids, mask)
        pooled = pool(self.pooling, out, self.attention)
        logits = pooled.s_emb @ self.W_out + self.b_out
        return logits, out, pooled

    def log_probs(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        logits, _, _ = self.forward(ids, mask)
        return ad.log_softmax(logits, axis=-1).values

    def meta(self) -> dict:
        return {"pooling": self.pooling.value, "vocab_size": self.vocab_size, "num_classes": self.num_classes,
                "embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim,
                "forget_bias_mode": self.forget_bias_mode}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise KeyError(f"state keys {sorted(state)} do not match model keys {sorted(params)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.values = np.array(state[k], dtype=np.float64)

    def save(self, path: str | Path, **extra) -> None:
        save_checkpoint(path, self.state_dict(), {**self.meta(), **extra})

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierModel":
        state, meta = load_checkpoint(path)
        model = cls(meta["vocab_size"], meta["num_classes"], meta["pooling"], meta["embed_dim"],
                    meta["hidden_dim"], meta["forget_bias_mode"])
        model.load_state_dict(state)
        return model

    @classmethod
    def from_config(cls, config: TrainConfig, vocab_size: int, num_classes: int,
                    embeddings: np.ndarray | None = None) -> "ClassifierModel":
        return cls(vocab_size, num_classes, config.pooling, config.embed_dim, config.hidden_dim,
                   config.forget_bias_mode, config.seed, embeddings)


def forward_loss(model: ClassifierModel, batch: Batch) -> tuple[Tensor, Tensor, BiLstmOutput]:
    """Mean cross-entropy over the batch, plus logits and the encoder output."""
    logits, out, _ = model.forward(batch.ids, batch.mask)
    return ad.cross_entropy(logits, batch.labels), logits, out


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam; ``weight_decay`` is decoupled (applied to the weights directly)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay:
            update = update + lr * weight_decay * p.values
        p.values -= update


# ---------------------------------------------------------------------------
# training loop


@dataclass
class BatchContext:
    epoch: int
    batch_index: int
    examples_seen: int
    batch: Batch
    output: BiLstmOutput
    norms: list[np.ndarray]
    loss: float


Hook = Callable[[BatchContext], None]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    valid_acc: float
    seconds: float


@dataclass
class TrainReport:
    config: dict
    history: list[EpochRecord] = field(default_factory=list)
    ratios: list[RatioEntry] = field(default_factory=list)
    threshold_batch: int | None = None
    threshold_examples: int | None = None
    threshold_ratio: float | None = None
    best_epoch: int | None = None
    best_valid_acc: float = -math.inf
    test_acc: float | None = None
    notes: list[str] = field(default_factory=list)
    best_state: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "best_state"}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        d = dict(d)
        d["history"] = [EpochRecord(**h) for h in d.get("history", [])]
        d["ratios"] = [RatioEntry(**r) for r in d.get("ratios", [])]
        return cls(**d)


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


class Predictor(Protocol):
    def log_probs(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray: ...


def predict(model: Predictor, corpus: Corpus, batch_size: int = 64) -> np.ndarray:
    preds = np.empty(len(corpus), dtype=np.int64)
    for b in pad_batch(corpus.examples, batch_size):
        preds[b.index] = np.argmax(model.log_probs(b.ids, b.mask), axis=1)
    return preds


def evaluate_accuracy(model: Predictor, corpus: Corpus, batch_size: int = 64) -> float:
    if len(corpus) == 0:
        raise ValueError("cannot evaluate on an empty corpus")
    return float(np.mean(predict(model, corpus, batch_size) == corpus.labels))


def split_validation(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    k = max(1, int(round(fraction * len(corpus))))
    return corpus.subset(sorted(order[k:])), corpus.subset(sorted(order[:k]))


def train(model: ClassifierModel, config: TrainConfig, train_set: Corpus, valid_set: Corpus | None = None,
          hooks: Sequence[Hook] = ()) -> TrainReport:
    """Adam training with per-epoch best-validation checkpointing.

    Every batch the per-position gradient norms of the encoder states are read
    after backward and handed to ``hooks``.  A vanishing-ratio entry is logged
    every ``config.ratio_every`` examples.  The 95% trigger watches the running
    training accuracy over the most recent ``len(train_set)`` predictions (one
    epoch-equivalent) and fires once that window is full.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    report = TrainReport(config=dataclasses.asdict(config))
    if valid_set is None:
        train_set, valid_set = split_validation(train_set, config.valid_fraction, config.seed)
        report.notes.append(f"validation: {len(valid_set)} examples held out from train (seed {config.seed})")
    report.notes.append("train_acc trigger: running accuracy over the last epoch-equivalent of batch predictions")

    params = model.parameters()
    adam = AdamState()
    shuffle_rng = np.random.default_rng(config.seed + 1)
    window: deque[tuple[int, int]] = deque()
    window_correct = window_total = 0
    examples_seen = batch_index = 0
    next_log = config.ratio_every
    block_mid = block_end = 0.0
    block_acc: list[int] = [0, 0]
    valid_acc = math.nan
    stop = False

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        ep_loss = ep_correct = ep_total = 0
        order = shuffle_rng.permutation(len(train_set))
        for batch in pad_batch(train_set.examples, config.batch_size, order):
            ad.zero_grad(params.values())
            loss, logits, out = forward_loss(model, batch)
            ad.backward(loss)
            norms = capture_grad_norms(out)

            correct = int(np.sum(np.argmax(logits.values, axis=1) == batch.labels))
            ep_loss += loss.item() * len(batch)
            ep_correct += correct
            ep_total += len(batch)
            examples_seen += len(batch)
            window.append((correct, len(batch)))
            window_correct += correct
            window_total += len(batch)
            while window and window_total - window[0][1] >= len(train_set):
                c, k = window.popleft()
                window_correct -= c
                window_total -= k
            running_acc = window_correct / window_total

            usable = [v for v in norms if len(v) >= 2]
            block_mid += sum(v[mid_index(len(v))] for v in usable)
            block_end += sum(v[0] for v in usable)
            block_acc[0] += correct
            block_acc[1] += len(batch)
            if examples_seen >= next_log:
                ratio = block_mid / block_end if block_end > 0 else math.nan
                report.ratios.append(RatioEntry(batch_index, examples_seen, float(ratio),
                                                block_acc[0] / block_acc[1], valid_acc))
                block_mid = block_end = 0.0
                block_acc = [0, 0]
                next_log += config.ratio_every

            ctx = BatchContext(epoch, batch_index, examples_seen, batch, out, norms, loss.item())
            for hook in hooks:
                hook(ctx)

            if (report.threshold_batch is None and window_total >= len(train_set)
                    and running_acc >= config.train_acc_threshold):
                report.threshold_batch = batch_index
                report.threshold_examples = examples_seen
                report.threshold_ratio = batch_vanishing_ratio(norms)
                log.info("train acc %.3f reached at batch %d, ratio %.3g", running_acc, batch_index,
                         report.threshold_ratio)
                if config.stop_at_threshold:
                    stop = True

            adam_step(adam, params, config.lr, config.weight_decay)
            batch_index += 1
            if stop:
                break

        valid_acc = evaluate_accuracy(model, valid_set)
        report.history.append(EpochRecord(epoch, ep_loss / ep_total, ep_correct / ep_total, valid_acc,
                                          time.perf_counter() - t0))
        log.info("epoch %d loss %.4f train %.3f valid %.3f", epoch, ep_loss / ep_total,
                 ep_correct / ep_total, valid_acc)
        if valid_acc > report.best_valid_acc:
            report.best_valid_acc = valid_acc
            report.best_epoch = epoch
            report.best_state = model.state_dict()
        if stop:
            break

    if report.best_state is not None:
        model.load_state_dict(report.best_state)
    return report
