"""Training objectives (Dice + cross-entropy + intention term) and eval metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeMismatch, Tensor


class MissingIntentPair(ValueError):
    """Intent logits/label required by the config but not supplied (or vice versa)."""


class ClassOutOfRange(ValueError):
    """Intent label outside [0, C)."""


@dataclass
class LossConfig:
    dice_smooth: float = 1e-6
    include_intent_term: bool = True
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (dice, ce_mask, ce_intent)

    def __post_init__(self):
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")
        if any(w < 0 for w in self.weights):
            raise ValueError("loss weights must be non-negative")


@dataclass
class NSDConfig:
    tolerance: int = 2  # pixels; boundary extraction is 4-connectivity

    def __post_init__(self):
        if self.tolerance < 0 or int(self.tolerance) != self.tolerance:
            raise ValueError("tolerance must be a non-negative integer")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def dice_loss(pred: Tensor, target, smooth: float = 1e-6) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), differentiable in pred."""
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"dice_loss: pred {pred.shape} vs target {target.shape}")
    inter = T.tsum(pred * target)
    denom = T.tsum(pred) + T.tsum(target)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def _clamp01(p: Tensor, eps: float = 1e-7) -> Tensor:
    # relu-based clamp keeps the op differentiable with unit gradient inside (eps, 1-eps)
    low = eps + T.relu(p - eps)
    return (1.0 - eps) - T.relu((1.0 - eps) - low)


def ce_mask_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over pixels; pred clamped to [1e-7, 1-1e-7]."""
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"ce_mask_loss: pred {pred.shape} vs target {target.shape}")
    p = _clamp01(pred)
    ll = target * T.log(p) + (1.0 - target) * T.log(1.0 - p)
    return -T.tmean(ll)


def ce_intent_loss(logits: Tensor, label) -> Tensor:
    """Softmax cross-entropy. Accepts (C,) with an int label or (N, C) with int labels."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
        labels = np.asarray([label], dtype=np.int64)
    else:
        labels = np.asarray(label, dtype=np.int64).reshape(-1)
        if labels.shape[0] != logits.shape[0]:
            raise ShapeMismatch(
                f"ce_intent_loss: {logits.shape[0]} logit rows vs {labels.shape[0]} labels"
            )
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ClassOutOfRange(f"labels must lie in [0, {c}), got {labels.tolist()}")
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    probs = _clamp01(T.softmax(logits, axis=1), eps=1e-12)
    picked = T.tsum(Tensor(onehot, dtype=logits.data.dtype) * T.log(probs), axis=1)
    return -T.tmean(picked)


def combined_loss(
    config: LossConfig,
    pred: Tensor,
    target,
    intent_logits: Tensor | None = None,
    intent_label=None,
) -> Tensor:
    """w_dice*dice + w_ce*ce_mask (+ w_intent*ce_intent when the config includes it)."""
    has_pair = intent_logits is not None and intent_label is not None
    if config.include_intent_term and not has_pair:
        raise MissingIntentPair("config includes the intent term but no logits/label given")
    if not config.include_intent_term and has_pair:
        raise MissingIntentPair("intent pair supplied but include_intent_term is False")
    w_dice, w_ce, w_intent = config.weights
    loss = w_dice * dice_loss(pred, target, config.dice_smooth) + w_ce * ce_mask_loss(
        pred, target
    )
    if config.include_intent_term:
        loss = loss + w_intent * ce_intent_loss(intent_logits, intent_label)
    return loss


# -- evaluation metrics (plain numpy, binarized inputs) ------------------------


def _check_binary_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"metric inputs {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def dice_metric(pred, target) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _check_binary_pair(pred, target)
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def boundary_pixels(mask) -> np.ndarray:
    """(k, 2) coordinates of 4-connectivity inner-boundary pixels.

    A mask pixel is boundary if any 4-neighbour lies outside the mask; pixels
    on the image border count their missing neighbours as outside.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ShapeMismatch(f"boundary_pixels expects 2-D mask, got {m.shape}")
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def nsd_metric(pred, target, tolerance: int = 2) -> float:
    """Symmetric normalized surface distance at the given pixel tolerance.

    Fraction of boundary pixels of each mask lying within Euclidean distance
    `tolerance` of the other mask's boundary; 1.0 when both boundaries are empty.
    """
    a, b = _check_binary_pair(pred, target)
    ba = boundary_pixels(a)
    bb = boundary_pixels(b)
    if len(ba) == 0 and len(bb) == 0:
        return 1.0
    if len(ba) == 0 or len(bb) == 0:
        return 0.0
    d2 = ((ba[:, None, :] - bb[None, :, :]) ** 2).sum(axis=2)
    tol2 = tolerance * tolerance
    hits_a = int((d2.min(axis=1) <= tol2).sum())
    hits_b = int((d2.min(axis=0) <= tol2).sum())
    return (hits_a + hits_b) / (len(ba) + len(bb))
