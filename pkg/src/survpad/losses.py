"""Loss functions with analytic gradients, gradient reversal, and the solution composites.

Every loss returns a :class:`LossResult` whose ``grad`` is taken with respect
to the loss's first argument. Batched losses average over samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

EPS = 1e-7
DEFAULT_FOCAL_GAMMA = 2.0
DEFAULT_SUBCENTERS = 3
DEFAULT_SUBCENTER_SCALE = 16.0
ANGULAR_MARGIN = 0.5


@dataclass
class LossResult:
    value: float
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise FloatingPointError("loss value is not finite")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def cross_entropy(logits, target) -> LossResult:
    """Softmax cross-entropy averaged over the batch.

    ``target`` is an integer class index (per row) or a probability
    distribution with the same shape as ``logits``.
    """
    z = np.asarray(logits, dtype=float)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    n, c = z2.shape
    t = np.asarray(target)
    if t.shape == z.shape and np.issubdtype(t.dtype, np.floating):
        t2 = t.astype(float).reshape(n, c)
    else:
        idx = np.atleast_1d(t).astype(int)
        t2 = np.zeros((n, c))
        t2[np.arange(n), idx] = 1.0
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = -(t2 * log_p).sum() / n
    grad = (np.exp(log_p) * t2.sum(axis=1, keepdims=True) - t2) / n
    return LossResult(value, grad[0] if single else grad)


def _clamp(p):
    p = np.asarray(p, dtype=float)
    inside = (p > EPS) & (p < 1 - EPS)
    return np.clip(p, EPS, 1 - EPS), inside


def bce(p, t) -> LossResult:
    """Binary cross-entropy on probabilities, mean over elements; ``p`` clamped to ``[1e-7, 1 - 1e-7]``."""
    pc, inside = _clamp(p)
    t = np.broadcast_to(np.asarray(t, dtype=float), pc.shape)
    n = pc.size
    value = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).sum() / n
    grad = (-(t / pc) + (1 - t) / (1 - pc)) * inside / n
    return LossResult(value, grad)


def focal(p, t, gamma: float = DEFAULT_FOCAL_GAMMA) -> LossResult:
    """Binary focal loss ``-(1 - p_t)^gamma log p_t``, mean over elements.

    Soft targets mix the two branches linearly, so ``gamma = 0`` is exactly BCE.
    """
    pc, inside = _clamp(p)
    t = np.broadcast_to(np.asarray(t, dtype=float), pc.shape)
    n = pc.size
    q = 1 - pc
    log_p, log_q = np.log(pc), np.log(q)
    pos = q**gamma * log_p
    neg = pc**gamma * log_q
    value = -(t * pos + (1 - t) * neg).sum() / n
    if gamma == 0:
        d_pos, d_neg = 1 / pc, -1 / q
    else:
        d_pos = -gamma * q ** (gamma - 1) * log_p + q**gamma / pc
        d_neg = gamma * pc ** (gamma - 1) * log_q - pc**gamma / q
    grad = -(t * d_pos + (1 - t) * d_neg) * inside / n
    return LossResult(value, grad)


def pixelwise_bce(pred_map, label: int) -> LossResult:
    """Mean BCE of a predicted map against an all-ones (bona fide) or all-zeros (attack) map."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    pred_map = np.asarray(pred_map, dtype=float)
    return bce(pred_map, np.full(pred_map.shape, float(label)))


# --------------------------------------------------------------------------
# Sub-center angular margin


@dataclass
class SubCenterBank:
    """``centers[c, k]`` is the k-th unit sub-center of class ``c``."""

    centers: np.ndarray
    scale: float = DEFAULT_SUBCENTER_SCALE

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        if self.centers.ndim != 3:
            raise ValueError("centers must be shaped (n_classes, K, dim)")
        self.renormalize()

    @classmethod
    def random(cls, n_classes: int, k: int, dim: int, rng: np.random.Generator,
               scale: float = DEFAULT_SUBCENTER_SCALE) -> "SubCenterBank":
        return cls(rng.standard_normal((n_classes, k, dim)), scale)

    def renormalize(self) -> None:
        norms = np.linalg.norm(self.centers, axis=-1, keepdims=True)
        if (norms == 0).any():
            raise ValueError("sub-centers must be nonzero")
        self.centers = self.centers / norms


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("feature must be nonzero")
    return v / norm


def sub_center_angle(feature, bank: SubCenterBank, cls: int) -> float:
    """Smallest angle between ``feature`` and any sub-center of class ``cls``."""
    f = _unit(np.asarray(feature, dtype=float))
    cos = bank.centers[cls] @ f
    return float(np.arccos(np.clip(cos.max(), -1.0, 1.0)))


def angular_margin_loss(thetas, targets, margin: float = ANGULAR_MARGIN) -> LossResult:
    """Binary angular-margin loss, mean over samples::

        -(1/n) sum_i [ t_i cos(theta_i + m) + (1 - t_i) log(1 - cos theta_i) ]

    The first term carries no logarithm, as published; it is kept that way on
    purpose. ``1 - cos theta`` is clamped below at 1e-7. Gradient is w.r.t. theta.
    """
    th = np.asarray(thetas, dtype=float)
    t = np.broadcast_to(np.asarray(targets, dtype=float), th.shape)
    n = th.size
    one_minus = 1 - np.cos(th)
    inside = one_minus > EPS
    om = np.maximum(one_minus, EPS)
    value = -(t * np.cos(th + margin) + (1 - t) * np.log(om)).sum() / n
    grad = -(-t * np.sin(th + margin) + (1 - t) * inside * np.sin(th) / om) / n
    return LossResult(value, grad)


# --------------------------------------------------------------------------
# Gradient reversal


class GradientReversal:
    """Identity on the forward pass; multiplies the incoming gradient by ``-lam`` on the way back."""

    def __init__(self, lam: float = 1.0):
        if lam < 0:
            raise ValueError("GRL lambda must be >= 0")
        self.lam = lam

    def forward(self, x):
        return x

    def backward(self, grad_in):
        return -self.lam * np.asarray(grad_in, dtype=float)


def grl(gradient_in, lam: float = 1.0) -> np.ndarray:
    return GradientReversal(lam).backward(gradient_in)


# --------------------------------------------------------------------------
# Composites

COMPOSITE_WEIGHTS: dict[str, dict[str, float]] = {
    "ctel": {"cls": 1.0, "adv": 1.0},
    "hexianhua": {"cls": 1.0, "focal": 0.5},
    "opdai": {"focal1": 1.0, "focal2": 0.5, "focal3": 0.5},
    "chenyifan": {"ori": 3.0, "face": 1.0, "eyes": 0.5, "nose": 0.5, "chin": 0.5, "concat": 3.0},
    "ionetworks": {"bce": 0.5, "ang": 0.5},
}


@dataclass
class CompositeLoss(LossResult):
    parts: dict[str, LossResult] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)


def weighted_sum(weights: Mapping[str, float], parts: Mapping[str, LossResult | float]) -> CompositeLoss:
    """Weighted sum of component losses.

    If every part has a gradient of the same shape (all taken w.r.t. one
    input) the gradients are combined with the same weights; otherwise the
    composite carries no gradient and callers scale each part's own gradient.
    """
    if set(weights) != set(parts):
        raise ValueError(f"expected loss terms {sorted(weights)}, got {sorted(parts)}")
    results = {k: v if isinstance(v, LossResult) else LossResult(v) for k, v in parts.items()}
    value = sum(weights[k] * results[k].value for k in weights)
    grads = [results[k].grad for k in weights]
    grad = None
    if all(g is not None for g in grads) and len({np.shape(g) for g in grads}) == 1:
        grad = sum(weights[k] * results[k].grad for k in weights)
    return CompositeLoss(value, grad, parts=results, weights=dict(weights))


def total_ctel(cls, adv) -> CompositeLoss:
    return weighted_sum(COMPOSITE_WEIGHTS["ctel"], {"cls": cls, "adv": adv})


def total_hexianhua(cls, focal_loss) -> CompositeLoss:
    return weighted_sum(COMPOSITE_WEIGHTS["hexianhua"], {"cls": cls, "focal": focal_loss})


def total_opdai(focal1, focal2, focal3) -> CompositeLoss:
    return weighted_sum(COMPOSITE_WEIGHTS["opdai"], {"focal1": focal1, "focal2": focal2, "focal3": focal3})


def total_chenyifan(ori, face, eyes, nose, chin, concat) -> CompositeLoss:
    return weighted_sum(
        COMPOSITE_WEIGHTS["chenyifan"],
        {"ori": ori, "face": face, "eyes": eyes, "nose": nose, "chin": chin, "concat": concat},
    )


def total_ionetworks(bce_loss, ang) -> CompositeLoss:
    return weighted_sum(COMPOSITE_WEIGHTS["ionetworks"], {"bce": bce_loss, "ang": ang})
