"""Gradient-flow diagnostics over per-position hidden-state gradients.

The vanishing ratio of one example is ``|dL/dh_mid| / |dL/dh_0|`` where ``mid``
is ``(n - 1) // 2`` over the valid positions and the end is the left one
(right ends may be padding).  Profiles are the per-position norms resampled to
100 points and averaged across examples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .recurrent import BiLstmOutput

PROFILE_LEN = 100
LOG_FLOOR = 1e-300


def capture_grad_norms(out: BiLstmOutput) -> list[np.ndarray]:
    """L2 norm of dL/dh_t over the concatenated state, per valid position of each example."""
    if out.grad_handles is None or not out.grad_handles.filled:
        raise RuntimeError("no gradients captured: run backward through this encoder output first")
    norms = np.linalg.norm(out.grad_handles.hidden_grads(), axis=-1)
    return [norms[b, :L] for b, L in enumerate(out.lengths)]


def lin_interp(values: Sequence[float], target_len: int = PROFILE_LEN) -> np.ndarray:
    """Sample position ``j * (n - 1) / (target_len - 1)`` of ``values`` for j = 0..target_len-1."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n == 0:
        raise ValueError("cannot interpolate an empty sequence")
    if n == 1:
        return np.full(target_len, values[0])
    coords = np.arange(target_len) * (n - 1) / (target_len - 1)
    return np.interp(coords, np.arange(n), values)


def mid_index(n: int) -> int:
    return (n - 1) // 2


def vanishing_ratio(norms: Sequence[float]) -> float:
    """Mid-position norm over left-end norm; NaN when the end norm is zero."""
    norms = np.asarray(norms, dtype=np.float64)
    if len(norms) < 2:
        raise ValueError("vanishing ratio needs at least two valid positions")
    end = norms[0]
    if end == 0.0:
        return math.nan
    return float(norms[mid_index(len(norms))] / end)


def batch_vanishing_ratio(norms: Sequence[np.ndarray]) -> float:
    """Ratio of batch means: mean mid-norm over mean left-end norm.

    Examples shorter than two positions are skipped; NaN if nothing remains or
    every end norm is zero.
    """
    usable = [v for v in norms if len(v) >= 2]
    if not usable:
        return math.nan
    mid = np.mean([v[mid_index(len(v))] for v in usable])
    end = np.mean([v[0] for v in usable])
    return float(mid / end) if end > 0 else math.nan


@dataclass
class GradientProfile:
    norms: np.ndarray
    example_count: int
    source_lengths: list[int] = field(default_factory=list)

    @property
    def log10(self) -> np.ndarray:
        return np.log10(np.maximum(self.norms, LOG_FLOOR))

    def ratio(self) -> float:
        """Vanishing ratio read off the interpolated profile (display only)."""
        return vanishing_ratio(self.norms)


def aggregate_profiles(profiles: Sequence[np.ndarray], source_lengths: Sequence[int] = ()) -> GradientProfile:
    if len(profiles) == 0:
        raise ValueError("no profiles to aggregate")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in profiles])
    if stack.shape[1] != PROFILE_LEN:
        raise ValueError(f"profiles must have length {PROFILE_LEN}")
    # shifted mean: k copies of one profile average back to it exactly
    base = stack[0]
    return GradientProfile(base + (stack - base).mean(axis=0), len(stack), list(source_lengths))


class ProfileAccumulator:
    """Running sum of interpolated profiles, capped at ``max_examples``."""

    def __init__(self, max_examples: int | None = None):
        self.max_examples = max_examples
        self.total = np.zeros(PROFILE_LEN)
        self.count = 0
        self.lengths: list[int] = []

    @property
    def full(self) -> bool:
        return self.max_examples is not None and self.count >= self.max_examples

    def add(self, norms: Sequence[np.ndarray]) -> None:
        for v in norms:
            if self.full:
                return
            self.total += lin_interp(v)
            self.count += 1
            self.lengths.append(len(v))

    def merge(self, other: "ProfileAccumulator") -> "ProfileAccumulator":
        out = ProfileAccumulator(None)
        out.total = self.total + other.total
        out.count = self.count + other.count
        out.lengths = self.lengths + other.lengths
        return out

    def profile(self) -> GradientProfile:
        if self.count == 0:
            raise ValueError("no examples accumulated")
        return GradientProfile(self.total / self.count, self.count, list(self.lengths))


# ---------------------------------------------------------------------------
# CSV artifacts

RATIO_COLUMNS = ("batch_index", "examples_seen", "ratio", "train_acc", "valid_acc")


@dataclass
class RatioEntry:
    batch_index: int
    examples_seen: int
    ratio: float
    train_acc: float
    valid_acc: float


def write_ratio_csv(path: str | Path, entries: Sequence[RatioEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RATIO_COLUMNS)
        for e in entries:
            w.writerow([e.batch_index, e.examples_seen, repr(e.ratio), repr(e.train_acc), repr(e.valid_acc)])


def read_ratio_csv(path: str | Path) -> list[RatioEntry]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != RATIO_COLUMNS:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [RatioEntry(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in rows[1:]]


def write_curve_csv(path: str | Path, curve: np.ndarray, meta: dict) -> None:
    """``#key=value`` metadata lines, then a header ``p0..p99`` and one row of values."""
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"#{k}={v}\n")
        w = csv.writer(fh)
        w.writerow([f"p{j}" for j in range(len(curve))])
        w.writerow([repr(float(x)) for x in curve])


def read_curve_csv(path: str | Path) -> tuple[np.ndarray, dict]:
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].rstrip("\n").partition("=")
                meta[k] = v
            else:
                body.append(line)
    rows = list(csv.reader(body))
    if len(rows) != 2 or rows[0] != [f"p{j}" for j in range(len(rows[0]))]:
        raise ValueError(f"{path}: malformed curve file")
    return np.array([float(x) for x in rows[1]]), meta


def write_profile_csv(path: str | Path, profile: GradientProfile, **meta) -> None:
    write_curve_csv(path, profile.norms, {"example_count": profile.example_count, **meta})
