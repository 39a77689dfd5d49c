"""Dice loss, cross-entropy, and the weighted training objective.

The objective is lambda1 * dice(softmax(main logits)) + lambda2 * CE(main
logits) + lambda3 * CE(aux logits).  Pixels labelled IGNORE contribute to
no sum and receive zero gradient.  total_loss also returns the analytic
gradients with respect to both logit maps; these seed the network
backward pass.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .raster import IGNORE_LABEL, LabelMap


@dataclass(frozen=True)
class LossWeights:
    dice: float
    ce_main: float
    ce_aux: float

    def __post_init__(self):
        if min(self.dice, self.ce_main, self.ce_aux) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dice == self.ce_main == self.ce_aux == 0:
            raise ValueError("at least one loss weight must be positive")


def _label_data(labels) -> np.ndarray:
    return labels.data if isinstance(labels, LabelMap) else np.asarray(labels)


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the class channel of a (C, H, W) map."""
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


def dice_loss(probs: np.ndarray, labels, epsilon: float = 1.0):
    """Class-averaged soft dice: 1 - mean_c (2*overlap_c + eps) / (sums_c + eps).

    Returns (value, grad) where grad is d(loss)/d(probs).
    """
    y = _label_data(labels)
    c, h, w = probs.shape
    if y.shape != (h, w):
        raise ValueError(f"labels {y.shape} do not match probs {probs.shape[1:]}")
    if epsilon <= 0:
        raise ValueError("dice smoothing epsilon must be positive")
    valid = y != IGNORE_LABEL
    assert np.allclose(probs.sum(axis=0)[valid], 1.0, atol=1e-6), "dice expects normalized probs"
    grad = np.zeros_like(probs)
    total = 0.0
    for k in range(c):
        onehot = (y == k) & valid
        p = probs[k]
        inter = float(p[onehot].sum())
        p_sum = float(p[valid].sum())
        y_sum = float(onehot.sum())
        num = 2.0 * inter + epsilon
        den = p_sum + y_sum + epsilon
        total += num / den
        # d/dp of -(1/C)*num/den: numerator term only where y==k
        grad[k][valid] += num / (c * den * den)
        grad[k][onehot] -= 2.0 / (c * den)
    return 1.0 - total / c, grad


def cross_entropy(logits: np.ndarray, labels):
    """Mean -log softmax(logits)[label] over non-IGNORE pixels.

    Returns (value, grad, all_ignored); with every pixel ignored the value
    is defined as 0 and a warning is emitted.
    """
    y = _label_data(labels)
    c, h, w = logits.shape
    if y.shape != (h, w):
        raise ValueError(f"labels {y.shape} do not match logits {logits.shape[1:]}")
    valid = y != IGNORE_LABEL
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("cross_entropy: every pixel is IGNORE, defining loss as 0")
        return 0.0, np.zeros_like(logits), True
    m = logits.max(axis=0)
    lse = m + np.log(np.exp(logits - m).sum(axis=0))
    picked = np.take_along_axis(logits, np.where(valid, y, 0)[None].astype(np.intp), axis=0)[0]
    value = float((lse - picked)[valid].sum() / n_valid)
    grad = softmax_channels(logits)
    onehot = np.zeros_like(grad)
    yy, xx = np.nonzero(valid)
    onehot[y[valid].astype(np.intp), yy, xx] = 1.0
    grad = (grad - onehot) / n_valid
    grad[:, ~valid] = 0.0
    return value, grad, False


@dataclass
class TotalLoss:
    dice: float
    ce_main: float
    ce_aux: float
    total: float
    grad_main: np.ndarray
    grad_aux: np.ndarray
    all_ignored: bool = False


def total_loss(main_logits, aux_logits, labels, weights: LossWeights, epsilon: float = 1.0) -> TotalLoss:
    """Weighted combination plus analytic gradients w.r.t. both logit maps."""
    if main_logits.shape != aux_logits.shape:
        raise ValueError("main and aux logits must share a shape")
    probs = softmax_channels(main_logits)
    dice_val, d_dice_dp = dice_loss(probs, labels, epsilon)
    ce_m, d_cem, ignored = cross_entropy(main_logits, labels)
    ce_a, d_cea, _ = cross_entropy(aux_logits, labels)

    # chain the dice gradient through the per-pixel softmax
    weighted = d_dice_dp * probs
    d_dice_dlogits = weighted - probs * weighted.sum(axis=0, keepdims=True)

    grad_main = weights.dice * d_dice_dlogits + weights.ce_main * d_cem
    grad_aux = weights.ce_aux * d_cea
    total = weights.dice * dice_val + weights.ce_main * ce_m + weights.ce_aux * ce_a
    return TotalLoss(dice_val, ce_m, ce_a, total, grad_main, grad_aux, ignored)
