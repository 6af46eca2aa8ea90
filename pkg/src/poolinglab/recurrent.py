"""LSTM cell and bidirectional encoder.

Gate equations (``*`` is the Hadamard product)::

    i = sigmoid(W_ii x + b_ii + W_hi h + b_hi)
    f = sigmoid(W_if x + b_if + W_hf h + b_hf)
    g = tanh(W_ig x + b_ig + W_hg h + b_hg)
    o = sigmoid(W_io x + b_io + W_ho h + b_ho)
    c' = f * c + i * g
    h' = o * tanh(c')

Weights are stored stacked along the gate axis in the order (i, f, g, o):
``W_x`` is (embed_dim, 4*hidden) so that ``x @ W_x`` gives all input
projections at once, likewise ``W_h`` is (hidden, 4*hidden).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GATES = ("i", "f", "g", "o")


class ForgetBias(str, enum.Enum):
    HIGH = "high"
    LOW = "low"


@dataclass
class LstmParams:
    W_x: Tensor
    W_h: Tensor
    b_x: Tensor
    b_h: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.W_h.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.W_x.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_x": self.W_x, "W_h": self.W_h, "b_x": self.b_x, "b_h": self.b_h}

    def block(self, name: str) -> np.ndarray:
        """View of one named block, e.g. ``W_if`` (hidden x embed) or ``b_ho``."""
        kind, gate = name[:-1], name[-1]
        k = GATES.index(gate)
        H = self.hidden_dim
        cols = slice(k * H, (k + 1) * H)
        if kind == "W_i":
            return self.W_x.values[:, cols].T
        if kind == "W_h":
            return self.W_h.values[:, cols].T
        if kind == "b_i":
            return self.b_x.values[cols]
        if kind == "b_h":
            return self.b_h.values[cols]
        raise KeyError(name)


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(embed_dim: int, hidden_dim: int, forget_bias_mode: ForgetBias | str = ForgetBias.HIGH,
                rng_seed: int | np.random.Generator = 0, prefix: str = "") -> LstmParams:
    """Xavier-uniform weights and biases.

    Biases on the input side share the bound of the input weights, biases on the
    recurrent side that of the recurrent weights.  ``high`` mode then overwrites
    the forget-gate biases so that ``b_if + b_hf == 1``.
    """
    if embed_dim < 1 or hidden_dim < 1:
        raise ValueError("dimensions must be positive")
    mode = ForgetBias(forget_bias_mode)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    H = hidden_dim
    bx = xavier_bound(embed_dim, H)
    bh = xavier_bound(H, H)
    W_x = rng.uniform(-bx, bx, size=(embed_dim, 4 * H))
    W_h = rng.uniform(-bh, bh, size=(H, 4 * H))
    b_x = rng.uniform(-bx, bx, size=4 * H)
    b_h = rng.uniform(-bh, bh, size=4 * H)
    if mode is ForgetBias.HIGH:
        b_x[H:2 * H] = 1.0
        b_h[H:2 * H] = 0.0
    return LstmParams(
        Tensor(W_x, requires_grad=True, name=prefix + "W_x"),
        Tensor(W_h, requires_grad=True, name=prefix + "W_h"),
        Tensor(b_x, requires_grad=True, name=prefix + "b_x"),
        Tensor(b_h, requires_grad=True, name=prefix + "b_h"),
    )


def zero_state(batch: int, hidden_dim: int) -> LstmState:
    return LstmState(Tensor(np.zeros((batch, hidden_dim))), Tensor(np.zeros((batch, hidden_dim))))


def lstm_cell_step(params: LstmParams, x_t: Tensor, prev: LstmState) -> LstmState:
    """One step built from tape primitives.  ``x_t`` is (batch, embed_dim)."""
    x_t = ad.as_tensor(x_t)
    if x_t.shape[-1] != params.embed_dim or prev.h.shape[-1] != params.hidden_dim:
        raise ValueError(f"lstm step: got x {x_t.shape}, h {prev.h.shape} for "
                         f"embed_dim={params.embed_dim}, hidden_dim={params.hidden_dim}")
    H = params.hidden_dim

    def pre(k):
        cols = slice(k * H, (k + 1) * H)
        return (x_t @ params.W_x[:, cols] + params.b_x[cols]) + (prev.h @ params.W_h[:, cols] + params.b_h[cols])

    i = ad.sigmoid(pre(0))
    f = ad.sigmoid(pre(1))
    g = ad.tanh(pre(2))
    o = ad.sigmoid(pre(3))
    c = f * prev.c + i * g
    h = o * ad.tanh(c)
    return LstmState(h, c)


# ---------------------------------------------------------------------------
# fused sequence kernel


def _gate_order(H: int) -> np.ndarray:
    # internal column order (i, f, o, g): one sigmoid over 3H columns, one tanh over H
    k = np.arange(H)
    return np.concatenate([k, H + k, 3 * H + k, 2 * H + k])


def lstm_sequences(x: Tensor, stacks: list[LstmParams], capture: "GradCapture | None" = None) -> Tensor:
    """Run ``D`` independent LSTMs left-to-right from zero state in one fused op.

    ``x`` is (D, B, n, E); chain ``d`` uses ``stacks[d]``.  Returns hidden states
    (D, B, n, H).  During backward the total gradient dL/dh_t of every step
    (direct plus recurrent paths) is added into ``capture.raw`` when given.
    Matches a loop of :func:`lstm_cell_step` to rounding error.
    """
    D, B, n, E = x.shape
    H = stacks[0].hidden_dim
    order = _gate_order(H)
    Wx = np.stack([p.W_x.values[:, order] for p in stacks])
    Wh = np.stack([p.W_h.values[:, order] for p in stacks])
    bias = np.stack([(p.b_x.values + p.b_h.values)[order] for p in stacks])

    # time-major buffers so every per-step slice is contiguous
    X = np.ascontiguousarray(np.moveaxis(x.values, 2, 0))  # (n, D, B, E)
    pre = np.matmul(X.reshape(n, D, B, E), Wx) + bias[None, :, None, :]  # (n, D, B, 4H)
    acts = pre  # overwritten in place with activations
    cs = np.empty((n, D, B, H))
    tcs = np.empty((n, D, B, H))
    hs = np.empty((n, D, B, H))
    h = np.zeros((D, B, H))
    c = np.zeros((D, B, H))
    H3 = 3 * H
    # sigmoid(a) = 1 / (1 + exp(-a)) on every column; the g block is then mapped
    # through tanh(a) = 2 * sigmoid(2a) - 1, so one exp covers all four gates
    scale = np.full(4 * H, -1.0)
    scale[H3:] = -2.0
    with np.errstate(over="ignore"):
        for t in range(n):
            a = acts[t]
            a += np.matmul(h, Wh)
            a *= scale
            np.exp(a, out=a)
            a += 1.0
            np.reciprocal(a, out=a)
            gg = a[..., H3:]
            gg *= 2.0
            gg -= 1.0
            ct = cs[t]
            np.multiply(a[..., H:2 * H], c, out=ct)
            ct += a[..., :H] * gg
            c = ct
            np.tanh(c, out=tcs[t])
            np.multiply(a[..., 2 * H:H3], tcs[t], out=hs[t])
            h = hs[t]

    def grad(g: np.ndarray):
        G = np.moveaxis(g, 2, 0)  # (n, D, B, H) view
        dG = np.empty((n, D, B, 4 * H))
        dh_next = np.zeros((D, B, H))
        dc_next = np.zeros((D, B, H))
        WhT = np.swapaxes(Wh, 1, 2)
        if capture is not None:
            capture.calls += 1
            cap = np.moveaxis(capture.raw, 2, 0)
        for t in range(n - 1, -1, -1):
            dh = G[t] + dh_next
            if capture is not None:
                cap[t] += dh
            s = acts[t]
            i, f, o, gg = s[..., :H], s[..., H:2 * H], s[..., 2 * H:H3], s[..., H3:]
            tc = tcs[t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            d = dG[t]
            np.multiply(dc * gg, i * (1.0 - i), out=d[..., :H])
            if t > 0:
                np.multiply(dc * cs[t - 1], f * (1.0 - f), out=d[..., H:2 * H])
            else:
                d[..., H:2 * H] = 0.0
            np.multiply(dh * tc, o * (1.0 - o), out=d[..., 2 * H:H3])
            np.multiply(dc * i, 1.0 - gg * gg, out=d[..., H3:])
            dc_next = dc * f
            dh_next = np.matmul(d, WhT)
        h_prev = np.empty_like(hs)
        h_prev[0] = 0.0
        h_prev[1:] = hs[:-1]
        dG2 = np.moveaxis(dG, 0, 1).reshape(D, n * B, 4 * H)
        hp2 = np.moveaxis(h_prev, 0, 1).reshape(D, n * B, H)
        X2 = np.moveaxis(X, 0, 1).reshape(D, n * B, E)
        inverse = np.argsort(order)
        dWh = np.matmul(np.swapaxes(hp2, 1, 2), dG2)[:, :, inverse]
        dWx = np.matmul(np.swapaxes(X2, 1, 2), dG2)[:, :, inverse]
        db = dG2.sum(axis=1)[:, inverse]
        dX = np.moveaxis(np.matmul(dG, np.swapaxes(Wx, 1, 2)), 0, 2)
        out = [dX]
        for k in range(D):
            out += [dWx[k], dWh[k], db[k], db[k]]
        return tuple(out)

    parents = [x]
    for p in stacks:
        parents += [p.W_x, p.W_h, p.b_x, p.b_h]
    return ad.record(np.moveaxis(hs, 0, 2).copy(), parents, grad, "lstm_sequences")


# ---------------------------------------------------------------------------
# bidirectional encoder


def reversal_permutation(lengths: np.ndarray, n: int) -> np.ndarray:
    """Per-row index map reversing the first ``lengths[b]`` positions, pads untouched."""
    t = np.arange(n)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


@dataclass
class GradCapture:
    """Per-position dL/dh_t for both chains, filled during backward.

    ``raw`` is (2, B, n, hidden) in each chain's own reading order; ``calls``
    counts how many backward passes reached the encoder.
    """

    raw: np.ndarray
    perm: np.ndarray
    calls: int = 0

    @property
    def filled(self) -> bool:
        return self.calls > 0

    def hidden_grads(self) -> np.ndarray:
        """(B, n, 2*hidden) gradients aligned with ``BiLstmOutput.H``."""
        fwd = self.raw[0]
        bwd = np.take_along_axis(self.raw[1], self.perm[:, :, None], axis=1)
        return np.concatenate([fwd, bwd], axis=-1)


@dataclass
class BiLstmOutput:
    H: Tensor
    mask: np.ndarray
    grad_handles: GradCapture | None = None
    lengths: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.lengths = self.mask.sum(axis=1)

    @property
    def hidden_dim(self) -> int:
        return self.H.shape[-1] // 2


def bilstm_forward(fwd: LstmParams, bwd: LstmParams, embedded: Tensor, mask: np.ndarray | None = None) -> BiLstmOutput:
    """Encode a right-padded batch.

    ``embedded`` is (B, n, E) (a single (n, E) sequence is promoted to B=1) and
    ``mask`` (B, n) marks valid positions, all valid ones first.  The backward
    chain reads each sequence reversed within its valid length, so trailing
    pads never leak into valid states.
    """
    embedded = ad.as_tensor(embedded)
    if embedded.ndim == 2:
        embedded = ad.reshape(embedded, (1,) + embedded.shape)
    B, n, E = embedded.shape
    if n == 0:
        raise ValueError("cannot encode an empty sequence")
    if E != fwd.embed_dim or E != bwd.embed_dim:
        raise ValueError(f"embedding dim {E} does not match LSTM input dim {fwd.embed_dim}")
    mask = np.ones((B, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, n)
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise ValueError("every sequence needs at least one valid position")

    perm = reversal_permutation(lengths, n)
    x_rev = ad.permute_positions(embedded, perm)
    stacked = ad.reshape(ad.concat([embedded, x_rev], axis=0), (2, B, n, E))
    capture = GradCapture(np.zeros((2, B, n, fwd.hidden_dim)), perm)
    states = lstm_sequences(stacked, [fwd, bwd], capture)
    h_fwd = states[0]
    h_bwd = ad.permute_positions(states[1], perm)
    H = ad.concat([h_fwd, h_bwd], axis=-1)
    return BiLstmOutput(H, mask, capture)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PLCKPT01"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | little-endian float64 payload``."""
    entries, offset = [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]
