"""Training-time control: progressive hard-sample curriculum, dynamic feature queue,
learning-rate schedules, EMA and early stopping."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

# --------------------------------------------------------------------------
# Progressive training strategy (PTS)

_ROUND_SLACK = 1e-9


@dataclass(frozen=True)
class PtsState:
    train_ids: frozenset[str]
    pending_ids: frozenset[str]
    labels: Mapping[str, int]
    rate: float
    decay: float
    step: int = 0
    last_moved: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "train_ids": sorted(self.train_ids),
            "pending_ids": sorted(self.pending_ids),
            "labels": dict(sorted(self.labels.items())),
            "rate": self.rate,
            "decay": self.decay,
            "step": self.step,
            "last_moved": list(self.last_moved),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PtsState":
        return cls(frozenset(d["train_ids"]), frozenset(d["pending_ids"]),
                   {k: int(v) for k, v in d["labels"].items()}, float(d["rate"]),
                   float(d["decay"]), int(d["step"]), tuple(d["last_moved"]))


def pts_init(samples: Mapping[str, int], initial_rate: float, seed: int,
             decay: float = 1.0) -> PtsState:
    """Draw ``floor(rate * n_c)`` ids uniformly from each class; the rest go to pending.

    ``samples`` maps id to label (1 bona fide, 0 attack).
    """
    if not (0 < initial_rate <= 1):
        raise ValueError("initial_rate must be in (0, 1]")
    if not (0 < decay <= 1):
        raise ValueError("decay must be in (0, 1]")
    rng = np.random.default_rng(seed)
    train: set[str] = set()
    for c in (1, 0):
        ids = sorted(i for i, lab in samples.items() if lab == c)
        if not ids:
            raise ValueError(f"class {c} has no samples")
        k = math.floor(initial_rate * len(ids) + _ROUND_SLACK)
        train.update(ids[j] for j in rng.permutation(len(ids))[:k])
    pending = frozenset(samples) - train
    return PtsState(frozenset(train), pending, dict(samples), float(initial_rate), float(decay))


def pts_quota(rate: float, n_pending: int) -> int:
    # the slack absorbs float error like 0.3 * 10 > 3; a positive rate still moves at least one sample
    quota = math.ceil(rate * n_pending - _ROUND_SLACK)
    if rate > 0 and n_pending > 0:
        quota = max(quota, 1)
    return min(n_pending, quota)


def pts_step(state: PtsState, pending_scores: Mapping[str, float]) -> PtsState:
    """Move the hardest pending samples into training, then decay the rate.

    Hard means low-scoring bona fide and high-scoring attacks, where the score
    is the model's bona fide probability. Each class moves
    ``ceil(rate * |pending_c|)`` samples; ties break on id.
    """
    if set(pending_scores) != state.pending_ids:
        missing = sorted(state.pending_ids - set(pending_scores))
        extra = sorted(set(pending_scores) - state.pending_ids)
        raise ValueError(f"pending score map mismatch: missing {missing}, extra {extra}")
    moved: list[str] = []
    for c in (1, 0):
        ids = [i for i in state.pending_ids if state.labels[i] == c]
        sign = 1.0 if c == 1 else -1.0
        ids.sort(key=lambda i: (sign * pending_scores[i], i))
        moved.extend(ids[: pts_quota(state.rate, len(ids))])
    moved_set = frozenset(moved)
    return PtsState(
        state.train_ids | moved_set,
        state.pending_ids - moved_set,
        state.labels,
        state.rate * state.decay,
        state.decay,
        state.step + 1,
        tuple(moved),
    )


# --------------------------------------------------------------------------
# Dynamic feature queue (DFQ)

DFQ_CAPACITY = 64
DFQ_ALPHA = 0.5
DFQ_SCALE = 16.0


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("feature must be nonzero")
    return v / n


@dataclass
class DfqState:
    """Negative-class center plus a bounded FIFO of normalized negative features.

    The center is the renormalized running mean of every negative feature
    passed to :func:`dfq_update`.
    """

    center: np.ndarray
    capacity: int = DFQ_CAPACITY
    alpha: float = DFQ_ALPHA
    scale: float = DFQ_SCALE
    queue: deque = field(default_factory=deque)
    center_sum: np.ndarray | None = None
    n_seen: int = 0

    def __post_init__(self):
        self.center = _unit(self.center)
        if self.capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        if not (-1 <= self.alpha <= 1):
            raise ValueError("alpha must be in [-1, 1]")
        if self.center_sum is None:
            self.center_sum = self.center.copy()

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "capacity": self.capacity,
            "alpha": self.alpha,
            "scale": self.scale,
            "queue": [q.tolist() for q in self.queue],
            "center_sum": self.center_sum.tolist(),
            "n_seen": self.n_seen,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DfqState":
        state = cls(np.asarray(d["center"]), d["capacity"], d["alpha"], d["scale"],
                    deque(np.asarray(q) for q in d["queue"]), np.asarray(d["center_sum"]), d["n_seen"])
        # restore the stored center bit for bit rather than renormalizing it
        state.center = np.asarray(d["center"], dtype=float)
        return state


def dfq_init(center, capacity: int = DFQ_CAPACITY, alpha: float = DFQ_ALPHA,
             scale: float = DFQ_SCALE) -> DfqState:
    return DfqState(np.asarray(center, dtype=float), capacity, alpha, scale)


def dfq_logits(feature, state: DfqState) -> tuple[float, float]:
    """Cosine to the negative center and the best cosine over the queue (-1 if empty)."""
    f = _unit(feature)
    log0 = float(f @ state.center)
    if not state.queue:
        return log0, -1.0
    log1 = float(np.max(np.stack(state.queue) @ f))
    return log0, log1


def dfq_scaled_logits(feature, state: DfqState) -> np.ndarray:
    return state.scale * np.asarray(dfq_logits(feature, state))


def dfq_update(state: DfqState, feature, log0: float) -> DfqState:
    """Enqueue a negative feature that sits far from the center (``log0 < alpha``).

    Evicts the queue head once the queue exceeds capacity, and folds the
    feature into the running center. Mutates and returns ``state``.
    """
    f = _unit(feature)
    if log0 < state.alpha:
        state.queue.append(f)
        if len(state.queue) > state.capacity:
            state.queue.popleft()
    state.center_sum = state.center_sum + f
    state.n_seen += 1
    norm = np.linalg.norm(state.center_sum)
    if norm > 0:
        state.center = state.center_sum / norm
    return state


# --------------------------------------------------------------------------
# Learning-rate schedules

SCHEDULE_KINDS = ("cosine_warmup", "cyclic", "step_decay", "cosine_annealing", "constant")


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    lr0: float = 0.01
    total_epochs: int = 100
    warmup_epochs: int = 1
    floor_ratio: float = 0.01
    base_lr: float = 1e-5
    max_lr: float = 2e-3
    step_size: int = 4
    step_epochs: int = 20
    step_gamma: float = 0.8
    min_lr: float = 0.0
    cycle_epochs: int | None = None
    cycle_decay: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; choose from {SCHEDULE_KINDS}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LrSchedule":
        return cls(**d)


def _cosine(start: float, end: float, progress: float) -> float:
    return end + (start - end) * 0.5 * (1 + math.cos(math.pi * progress))


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Learning rate at ``epoch`` (0-based). Schedules with a horizon clamp past it.

    * ``cosine_warmup``: linear ramp over ``warmup_epochs``, then cosine from
      ``lr0`` down to ``floor_ratio * lr0`` at the last epoch.
    * ``cyclic``: triangular wave between ``base_lr`` and ``max_lr``, half-period ``step_size``.
    * ``step_decay``: ``lr0 * step_gamma ** floor(epoch / step_epochs)``.
    * ``cosine_annealing``: cosine from ``lr0`` to ``min_lr`` over ``total_epochs``;
      with ``cycle_epochs`` it restarts each cycle at a peak scaled by ``cycle_decay``.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    s = schedule
    if s.kind == "constant":
        return s.lr0
    if s.kind == "cosine_warmup":
        last = s.total_epochs - 1
        e = min(epoch, last)
        if e < s.warmup_epochs:
            return s.lr0 * (e + 1) / (s.warmup_epochs + 1)
        span = last - s.warmup_epochs
        progress = 1.0 if span <= 0 else (e - s.warmup_epochs) / span
        return _cosine(s.lr0, s.floor_ratio * s.lr0, progress)
    if s.kind == "cyclic":
        cycle = math.floor(1 + epoch / (2 * s.step_size))
        x = abs(epoch / s.step_size - 2 * cycle + 1)
        return s.base_lr + (s.max_lr - s.base_lr) * max(0.0, 1 - x)
    if s.kind == "step_decay":
        return s.lr0 * s.step_gamma ** math.floor(epoch / s.step_epochs)
    # cosine_annealing
    e = min(epoch, s.total_epochs)
    if s.cycle_epochs:
        k = min(math.floor(e / s.cycle_epochs), math.ceil(s.total_epochs / s.cycle_epochs) - 1)
        peak = s.lr0 * s.cycle_decay**k
        return _cosine(peak, s.min_lr, min((e - k * s.cycle_epochs) / s.cycle_epochs, 1.0))
    return _cosine(s.lr0, s.min_lr, e / s.total_epochs)


# --------------------------------------------------------------------------
# EMA and early stopping


def ema_update(ema_params, params, decay: float):
    """``ema <- decay * ema + (1 - decay) * params`` for an array or a dict of arrays."""
    if not (0 <= decay < 1):
        raise ValueError("EMA decay must be in [0, 1)")
    if isinstance(params, Mapping):
        if set(ema_params) != set(params):
            raise ValueError("EMA and model parameter names differ")
        return {k: ema_update(ema_params[k], params[k], decay) for k in params}
    e, p = np.asarray(ema_params, dtype=float), np.asarray(params, dtype=float)
    if e.shape != p.shape:
        raise ValueError(f"EMA shape {e.shape} does not match parameter shape {p.shape}")
    return decay * e + (1 - decay) * p


def early_stop(history: Sequence[float], patience: int) -> bool:
    """True once the last ``patience`` epochs brought no improvement on the earlier best (lower is better)."""
    if not history:
        raise ValueError("history must be nonempty")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if len(history) <= patience:
        return False
    return min(history[-patience:]) >= min(history[:-patience])
