"""Sentence-embedding heads over BiLSTM states.

All heads take a :class:`~poolinglab.recurrent.BiLstmOutput` whose ``H`` is
(B, n, 2*hidden) with a validity mask, and return a :class:`PooledEmbedding`
with ``s_emb`` of shape (B, 2*hidden).  Pad positions never influence the
result.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .recurrent import BiLstmOutput

MASK_SENTINEL = -1e30
NORM_EPS = 1e-12


class PoolingKind(str, enum.Enum):
    LAST = "last"
    MEAN = "mean"
    MAX = "max"
    ATTENTION = "attention"
    MAX_ATTENTION = "max_attention"


@dataclass
class PooledEmbedding:
    s_emb: Tensor
    alpha: np.ndarray | None = None
    argmax_positions: np.ndarray | None = None


@dataclass
class AttentionParams:
    q: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "AttentionParams":
        bound = np.sqrt(6.0 / (dim + 1))
        return cls(Tensor(rng.uniform(-bound, bound, size=dim), requires_grad=True, name="attn.q"))


def _check(out: BiLstmOutput) -> None:
    if np.any(out.lengths < 1):
        raise ValueError("pooling needs at least one valid position per sequence")


def _additive_mask(out: BiLstmOutput) -> np.ndarray:
    return np.where(out.mask, 0.0, MASK_SENTINEL)


def pool_last(out: BiLstmOutput) -> PooledEmbedding:
    """[last valid forward state ; first backward state]."""
    _check(out)
    Hd = out.hidden_dim
    last = ad.gather_positions(out.H, out.lengths - 1)
    first = ad.gather_positions(out.H, np.zeros_like(out.lengths))
    return PooledEmbedding(ad.concat([last[:, :Hd], first[:, Hd:]], axis=-1))


def pool_mean(out: BiLstmOutput) -> PooledEmbedding:
    _check(out)
    m = out.mask[:, :, None].astype(float)
    total = ad.sum(out.H * m, axis=1)
    return PooledEmbedding(total / out.lengths[:, None].astype(float))


def _masked_max(out: BiLstmOutput) -> tuple[Tensor, np.ndarray]:
    shifted = out.H + _additive_mask(out)[:, :, None]
    return ad.max_with_argmax(shifted, axis=1)


def pool_max(out: BiLstmOutput) -> PooledEmbedding:
    """Per-dimension max over valid positions; argmax ties go to the first position."""
    _check(out)
    s, arg = _masked_max(out)
    return PooledEmbedding(s, argmax_positions=arg)


def _attend(out: BiLstmOutput, scores: Tensor) -> tuple[Tensor, np.ndarray]:
    alpha = ad.softmax(scores + _additive_mask(out), axis=1)
    s = ad.sum(out.H * ad.reshape(alpha, alpha.shape + (1,)), axis=1)
    return s, alpha.values


def pool_attention(out: BiLstmOutput, params: AttentionParams) -> PooledEmbedding:
    """Luong attention with a single learned query: alpha_t = softmax_t(h_t . q)."""
    _check(out)
    scores = ad.sum(out.H * params.q, axis=-1)
    s, alpha = _attend(out, scores)
    return PooledEmbedding(s, alpha=alpha)


def pool_max_attention(out: BiLstmOutput) -> PooledEmbedding:
    """Attention whose query is the sentence's own max-pooled state.

    Scores use unit-normalised states, the weighted sum uses the raw ones.  The
    query stays on the tape, so gradient also reaches the argmax states through it.
    """
    _check(out)
    q, arg = _masked_max(out)
    norms = ad.clamp_min(ad.l2_norm(out.H, axis=-1, keepdims=True), NORM_EPS)
    h_hat = out.H / norms
    scores = ad.sum(h_hat * ad.reshape(q, (q.shape[0], 1, q.shape[1])), axis=-1)
    s, alpha = _attend(out, scores)
    return PooledEmbedding(s, alpha=alpha, argmax_positions=arg)


def pool(kind: PoolingKind | str, out: BiLstmOutput, attention: AttentionParams | None = None) -> PooledEmbedding:
    kind = PoolingKind(kind)
    if kind is PoolingKind.LAST:
        return pool_last(out)
    if kind is PoolingKind.MEAN:
        return pool_mean(out)
    if kind is PoolingKind.MAX:
        return pool_max(out)
    if kind is PoolingKind.ATTENTION:
        if attention is None:
            raise ValueError("attention pooling needs AttentionParams")
        return pool_attention(out, attention)
    return pool_max_attention(out)
