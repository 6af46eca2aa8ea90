"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:func:`backward` on a scalar builds a :class:`Tape` (a topological ordering of
the reachable graph) and walks it in reverse exactly once.

Gradients accumulate into ``Tensor.grad`` across backward calls; call
:func:`zero_grad` (or ``Tensor.zero_grad``) between optimisation steps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()


class Tensor:
    """A dense float64 array that participates in a differentiation graph."""

    __slots__ = ("values", "grad", "requires_grad", "name", "node_id", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.grad = np.zeros_like(self.values) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(values: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Create the output node of an operation.

    ``backward_fn(g)`` receives the upstream gradient (same shape as ``values``)
    and must return one array (or ``None``) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.values = values
    out.name = None
    out.node_id = next(_ids)
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


@dataclass
class Tape:
    """Nodes reachable from a root, in an order where parents precede children."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        if not self.nodes:
            return
        grads: dict[int, np.ndarray] = {self.nodes[-1].node_id: seed}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.values.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_root(loss).backward(np.ones_like(loss.values))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    # only one-sided broadcasting (e.g. a bias row against a matrix) is supported
    if out is None or out not in (a.shape, b.shape):
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return record(a.values + b.values, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return record(a.values - b.values, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return record(a.values * b.values, (a, b),
                  lambda g: (_unbroadcast(g * b.values, a.shape),
                             _unbroadcast(g * a.values, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.values / b.values
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.values, a.shape),
                             _unbroadcast(-g * out / b.values, b.shape)), "div")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.values)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.values)
    return record(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.values)
    return record(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return record(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.values)
    return record(r, (a,), lambda g: (g * 0.5 / r,), "sqrt")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes where a > floor."""
    a = as_tensor(a)
    keep = a.values > floor
    return record(np.where(keep, a.values, floor), (a,), lambda g: (g * keep,), "clamp_min")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div (binary) or sigmoid, tanh, exp, log, sqrt."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional; leading dims of ``a`` are batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2:
        raise ValueError(f"matmul expects a[...,k] of ndim>=2 and b[k,n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def grad(g):
        ga = g @ b.values.T
        gb = a.values.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return record(a.values @ b.values, (a, b), grad, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index) -> Tensor:
    """``a[index]`` for any numpy index; backward scatters with accumulation."""
    a = as_tensor(a)

    def grad(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        return (full,)

    return record(a.values[index], (a,), grad, "take")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([t.values for t in ts], axis=axis), ts, grad, "concat")


def gather_positions(a, index: np.ndarray) -> Tensor:
    """Select one row per batch element: ``a[b, index[b]]`` for ``a`` of shape (B, n, ...)."""
    a = as_tensor(a)
    batch = np.arange(a.shape[0])
    index = np.asarray(index)

    def grad(g):
        full = np.zeros_like(a.values)
        full[batch, index] = g
        return (full,)

    return record(a.values[batch, index], (a,), grad, "gather_positions")


def permute_positions(a, perm: np.ndarray) -> Tensor:
    """Reorder axis 1 independently per batch row: ``out[b, t] = a[b, perm[b, t]]``."""
    a = as_tensor(a)
    perm = np.asarray(perm)
    idx = perm.reshape(perm.shape + (1,) * (a.ndim - 2))
    inverse = np.argsort(perm, axis=1, kind="stable")
    inv_idx = inverse.reshape(idx.shape)
    out = np.take_along_axis(a.values, idx, axis=1)
    return record(out, (a,), lambda g: (np.take_along_axis(g, inv_idx, axis=1),), "permute_positions")


def embedding(table, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)

    def grad(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return record(table.values[ids], (table,), grad, "embedding")


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for shape {a.shape}")
    axis %= a.ndim
    if a.shape[axis] == 0:
        raise ValueError(f"cannot reduce over empty axis {axis} of shape {a.shape}")
    return axis


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is None:
        return record(np.asarray(a.values.sum()), (a,),
                      lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    axis = _check_axis(a, axis)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(a.values.sum(axis=axis, keepdims=keepdims), (a,), grad, "sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.values.size
        if n == 0:
            raise ValueError("cannot take the mean of an empty tensor")
        return record(np.asarray(a.values.mean()), (a,),
                      lambda g: (np.full(a.shape, g / n),), "mean")
    axis = _check_axis(a, axis)
    n = a.shape[axis]

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return record(a.values.mean(axis=axis, keepdims=keepdims), (a,), grad, "mean")


def max_with_argmax(a, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; ties resolve to the first occurrence.

    The full upstream gradient is routed to the argmax slot, zero elsewhere.
    """
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    arg = np.argmax(a.values, axis=axis)
    idx = np.expand_dims(arg, axis)
    out = np.take_along_axis(a.values, idx, axis=axis).squeeze(axis)

    def grad(g):
        full = np.zeros_like(a.values)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return record(out, (a,), grad, "max"), arg


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    n = np.sqrt((a.values * a.values).sum(axis=axis, keepdims=True))

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (g * a.values / safe,)

    out = n if keepdims else n.squeeze(axis)
    return record(out, (a,), grad, "l2_norm")


def reduce(op_kind: str, a, axis: int):
    """Dispatch by name: sum, mean, max (returns ``(tensor, argmax)``) or l2_norm."""
    if op_kind == "sum":
        return sum(a, axis)
    if op_kind == "mean":
        return mean(a, axis)
    if op_kind == "max":
        return max_with_argmax(a, axis)
    if op_kind == "l2_norm":
        return l2_norm(a, axis)
    raise ValueError(f"unknown reduction {op_kind!r}")


# ---------------------------------------------------------------------------
# normalisers and losses


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.values.size == 0:
        raise ValueError("softmax of an empty tensor")
    axis = _check_axis(a, axis)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (a,), grad, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def grad(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), grad, "log_softmax")


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects logits (B, C) and labels (B,), got {logits.shape}, {labels.shape}")
    rows = np.arange(len(labels))
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[rows, labels].mean()

    def grad(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / len(labels)),)

    return record(np.asarray(loss), (logits,), grad, "cross_entropy")


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FiniteDifferenceReport:
    errors: dict[str, float]
    flagged: dict[str, int]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                            tol: float = 1e-4, kink_tol: float = 1e-2) -> FiniteDifferenceReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` must rebuild the graph from the current ``params`` values on each call.
    Per parameter the error is ``max|tape - fd| / max(max|tape|, max|fd|, 1e-10)``.
    Elements where the one-sided differences disagree by more than
    ``kink_tol * max(1, |slope|)`` sit on a non-differentiable point (for
    example a max near a tie); they are counted in ``flagged`` and excluded.
    """
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in params]
    base = float(f().values)

    errors: dict[str, float] = {}
    flagged: dict[str, int] = {}
    for k, (p, tape_grad) in enumerate(zip(params, analytic)):
        name = p.name or f"param{k}"
        flat = p.values.reshape(-1)
        fd = np.zeros(flat.size)
        kinks = np.zeros(flat.size, dtype=bool)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().values)
            flat[i] = orig - step
            down = float(f().values)
            flat[i] = orig
            fd[i] = (up - down) / (2 * step)
            fwd, bwd = (up - base) / step, (base - down) / step
            kinks[i] = abs(fwd - bwd) > kink_tol * max(1.0, abs(fd[i]))
        tg = tape_grad.reshape(-1)
        ok = ~kinks
        if ok.any():
            scale = max(np.abs(tg[ok]).max(), np.abs(fd[ok]).max(), 1e-10)
            errors[name] = float(np.abs(tg[ok] - fd[ok]).max() / scale)
        else:
            errors[name] = 0.0
        flagged[name] = int(kinks.sum())
    for p in params:
        p.zero_grad()
    return FiniteDifferenceReport(errors, flagged, tol)
