"""Class-balanced focal loss with per-batch effective-number weights, plus the gate sparsity penalty."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from safn.core import UsageError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.999
    gamma: float = 1.5
    lambda_s: float = 1e-3
    epsilon: float = 1e-7
    class_weighting: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise UsageError(f"beta must lie in (0, 1), got {self.beta}")
        if self.gamma < 0.0:
            raise UsageError(f"gamma must be >= 0, got {self.gamma}")
        if self.lambda_s < 0.0:
            raise UsageError(f"lambda_s must be >= 0, got {self.lambda_s}")
        if not 0.0 < self.epsilon < 0.5:
            raise UsageError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")


@dataclass(frozen=True)
class BatchLossBreakdown:
    focal_term: float
    sparsity_term: float
    total: float
    class_weights_used: tuple[float, float]
    batch_counts: tuple[int, int]

    def as_row(self) -> dict[str, float | int]:
        return {
            "focal": self.focal_term,
            "sparsity": self.sparsity_term,
            "total": self.total,
            "alpha_0": self.class_weights_used[0],
            "alpha_1": self.class_weights_used[1],
            "n_0": self.batch_counts[0],
            "n_1": self.batch_counts[1],
        }


def effective_number_weights(n_0: int, n_1: int, beta: float) -> tuple[float, float]:
    """alpha_c = (1 - beta) / (1 - beta**n_c); a class absent from the batch gets 0."""
    if n_0 < 0 or n_1 < 0 or n_0 + n_1 < 1:
        raise UsageError(f"Class counts must be non-negative with a positive total, got ({n_0}, {n_1})")

    def weight(n: int) -> float:
        if n == 0:
            return 0.0
        # 1 - beta**n via expm1 stays accurate for beta near 1
        return float((1.0 - beta) / -np.expm1(n * np.log(beta)))

    return weight(n_0), weight(n_1)


def batch_class_weights(labels: np.ndarray, config: LossConfig) -> tuple[float, float]:
    if not config.class_weighting:
        return 1.0, 1.0
    y = np.asarray(labels)
    n_1 = int(np.sum(y == 1))
    return effective_number_weights(int(y.size - n_1), n_1, config.beta)


def cb_focal(
    p: np.ndarray | float,
    y: np.ndarray | int,
    weights: tuple[float, float],
    gamma: float,
    epsilon: float = 1e-7,
) -> np.ndarray:
    """Per-sample -a1 (1-p)^g y log p - a0 p^g (1-y) log(1-p), with p clamped to [eps, 1-eps]."""
    pc = np.clip(np.asarray(p, dtype=np.float64), epsilon, 1.0 - epsilon)
    yy = np.asarray(y, dtype=np.float64)
    a0, a1 = weights
    pos = -a1 * (1.0 - pc) ** gamma * np.log(pc)
    neg = -a0 * pc**gamma * np.log1p(-pc)
    return np.where(yy == 1, pos, neg)


def cb_focal_logit_grad(
    p: np.ndarray,
    y: np.ndarray,
    weights: tuple[float, float],
    gamma: float,
    epsilon: float = 1e-7,
) -> np.ndarray:
    """d cb_focal / d logit per sample, zero where the clamp is active."""
    raw = np.asarray(p, dtype=np.float64)
    pc = np.clip(raw, epsilon, 1.0 - epsilon)
    a0, a1 = weights
    q = 1.0 - pc
    pos = a1 * (gamma * q**gamma * pc * np.log(pc) - q ** (gamma + 1.0))
    neg = a0 * (pc ** (gamma + 1.0) - gamma * pc**gamma * q * np.log1p(-pc))
    grad = np.where(np.asarray(y) == 1, pos, neg)
    clamped = (raw < epsilon) | (raw > 1.0 - epsilon)
    return np.where(clamped, 0.0, grad)


def sparsity_penalty(alpha: np.ndarray) -> float:
    """Batch mean of sum_j |alpha_j|."""
    a = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    if a.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sum(np.abs(a), axis=1)))


def total_loss(
    probs: np.ndarray,
    labels: np.ndarray,
    alpha: np.ndarray | None,
    config: LossConfig,
) -> BatchLossBreakdown:
    """Mean CB-focal over the batch plus lambda_s times the sparsity penalty.

    ``alpha=None`` drops the sparsity term, as the gate-free model has.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.size == 0:
        raise UsageError("Cannot compute the loss of an empty batch")
    weights = batch_class_weights(y, config)
    focal = float(np.mean(cb_focal(p, y, weights, config.gamma, config.epsilon)))
    sparsity = 0.0 if alpha is None else sparsity_penalty(alpha)
    n_1 = int(np.sum(y == 1))
    return BatchLossBreakdown(
        focal_term=focal,
        sparsity_term=sparsity,
        total=focal + config.lambda_s * sparsity,
        class_weights_used=weights,
        batch_counts=(int(y.size - n_1), n_1),
    )


def loss_gradients(
    probs: np.ndarray,
    labels: np.ndarray,
    alpha: np.ndarray | None,
    config: LossConfig,
    *,
    weights: tuple[float, float] | None = None,
    batch_size: int | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """(d total / d logit, d total / d alpha) for the samples given.

    A chunk of a larger mini-batch passes the full batch's ``weights`` and
    ``batch_size`` so the chunk gradients sum to the whole-batch gradient.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    denom = float(batch_size if batch_size is not None else p.size)
    w = weights if weights is not None else batch_class_weights(y, config)
    dlogit = cb_focal_logit_grad(p, y, w, config.gamma, config.epsilon) / denom
    dalpha = None
    if alpha is not None:
        a = np.asarray(alpha, dtype=np.float64)
        dalpha = config.lambda_s * np.sign(a) / denom
    return dlogit, dalpha
