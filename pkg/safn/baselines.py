"""Reference models: class-weighted L2 logistic regression and the plain concatenation MLP."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit

from safn import nn
from safn.core import FUSION_ORDER, DataError, Modality, UsageError
from safn.data import ModalityBatch
from safn.metrics import evaluate_predictions
from safn.optim import OptimConfig
from safn.recorder import TrainingRecorder
from safn.training import EPOCH_LOG_COLUMNS, FoldResult, fit_classifier

logger = logging.getLogger(__name__)


def _check_binary(y: np.ndarray) -> tuple[int, int]:
    n_1 = int(np.sum(y == 1))
    n_0 = int(y.size - n_1)
    if n_0 == 0 or n_1 == 0:
        raise DataError("Both classes required to fit a classifier")
    return n_0, n_1


# ============================================================================
# LOGISTIC REGRESSION
# ============================================================================

@dataclass
class LogRegParams:
    weights: np.ndarray
    bias: float
    C: float = 1.0
    converged: bool = True
    grad_norm: float = 0.0
    iterations: int = 0
    class_weighted: bool = True

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return expit(self.decision_function(x))

    def input_gradients(self, x: np.ndarray, target: Literal["probability", "logit"] = "probability") -> np.ndarray:
        """d target / d x for every row of ``x``."""
        if target == "logit":
            return np.broadcast_to(self.weights, np.shape(x)).copy()
        p = self.predict_proba(x)
        return (p * (1.0 - p))[:, None] * self.weights[None, :]


def _sample_weights(y: np.ndarray, class_weighted: bool) -> np.ndarray:
    if not class_weighted:
        return np.ones(y.size)
    n_0, n_1 = _check_binary(y)
    n = y.size
    return np.where(y == 1, n / (2.0 * n_1), n / (2.0 * n_0))


def logreg_objective(
    theta: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    sample_weights: np.ndarray,
    C: float,
) -> tuple[float, np.ndarray]:
    """Mean weighted BCE + ||w||^2 / (2 C n); ``theta`` is (w..., b)."""
    n = y.size
    w, b = theta[:-1], theta[-1]
    z = x @ w + b
    bce = -(y * log_expit(z) + (1 - y) * log_expit(-z))
    value = float(np.sum(sample_weights * bce) / n + w @ w / (2.0 * C * n))
    r = sample_weights * (expit(z) - y) / n
    grad = np.empty_like(theta)
    grad[:-1] = x.T @ r + w / (C * n)
    grad[-1] = r.sum()
    return value, grad


def train_logreg(
    x: np.ndarray,
    y: np.ndarray,
    C: float = 1.0,
    class_weighted: bool = True,
    seed: int = 0,
    *,
    tol: float = 1e-6,
    max_iter: int = 5000,
) -> LogRegParams:
    """Full-batch gradient descent with Barzilai-Borwein trial steps and Armijo backtracking."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if C <= 0:
        raise UsageError(f"C must be positive, got {C}")
    _check_binary(y)
    sw = _sample_weights(y, class_weighted)

    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, 0.01, size=x.shape[1] + 1)
    value, grad = logreg_objective(theta, x, y, sw, C)
    step = 1.0
    prev_theta = prev_grad = None
    iteration = 0
    for iteration in range(1, max_iter + 1):
        gnorm2 = float(grad @ grad)
        if math.sqrt(gnorm2) < tol:
            break
        if prev_theta is not None and prev_grad is not None:
            s, g = theta - prev_theta, grad - prev_grad
            sg = float(s @ g)
            if sg > 0:
                step = float(s @ s) / sg
        while True:
            candidate = theta - step * grad
            cand_value, cand_grad = logreg_objective(candidate, x, y, sw, C)
            if cand_value <= value - 1e-4 * step * gnorm2 or step < 1e-12:
                break
            step *= 0.5
        prev_theta, prev_grad = theta, grad
        theta, value, grad = candidate, cand_value, cand_grad

    grad_norm = float(np.linalg.norm(grad))
    converged = grad_norm < tol
    if not converged:
        logger.warning("Logistic regression stopped after %d iterations with gradient norm %.3g", iteration, grad_norm)
    return LogRegParams(
        weights=theta[:-1].copy(),
        bias=float(theta[-1]),
        C=C,
        converged=converged,
        grad_norm=grad_norm,
        iterations=iteration,
        class_weighted=class_weighted,
    )


def logreg_fold(
    train: ModalityBatch,
    val: ModalityBatch,
    *,
    modalities: Sequence[Modality] = FUSION_ORDER,
    seed: int = 0,
    fold: int | None = None,
    C: float = 1.0,
    threshold: float = 0.5,
) -> FoldResult:
    model = train_logreg(train.concatenated(modalities), train.labels, C=C, seed=seed)
    probs = model.predict_proba(val.concatenated(modalities))
    return FoldResult(
        checkpoint=None,
        epoch_log=pd.DataFrame(columns=list(EPOCH_LOG_COLUMNS)),
        step_log=pd.DataFrame(),
        report=evaluate_predictions(probs, val.labels, threshold, fold=fold),
        best_epoch=0,
        val_probs=probs,
        fold=fold,
        model_state=model,
    )


# ============================================================================
# PLAIN MLP
# ============================================================================

@dataclass(frozen=True)
class MlpBaselineConfig:
    hidden: tuple[int, ...] = (128, 64)
    dropout: float = 0.4
    pos_weight: float | None = None
    init: Literal["uniform", "zeros"] = "uniform"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    patience: int = 8

    def __post_init__(self) -> None:
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise UsageError("MLP hidden widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must lie in [0, 1), got {self.dropout}")

    def optim(self, seed: int) -> OptimConfig:
        return OptimConfig(
            lr=self.lr,
            weight_decay=0.0,
            clip_norm=None,
            ema_decay=None,
            epochs=self.epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            seed=seed,
            micro_batch=None,
            schedule="constant",
        )


@dataclass(frozen=True)
class MlpLayout:
    widths: tuple[int, ...]
    offsets: tuple[tuple[int, int, int], ...] = field(init=False)

    def __post_init__(self) -> None:
        offsets = []
        pos = 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            offsets.append((pos, pos + fan_in * fan_out, pos + fan_in * fan_out + fan_out))
            pos += fan_in * fan_out + fan_out
        object.__setattr__(self, "offsets", tuple(offsets))

    @property
    def size(self) -> int:
        return self.offsets[-1][2]

    def unpack(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        for (start, mid, stop), fan_in, fan_out in zip(self.offsets, self.widths[:-1], self.widths[1:]):
            layers.append((flat[start:mid].reshape(fan_in, fan_out), flat[mid:stop]))
        return layers


def init_mlp(layout: MlpLayout, seed: int, init: Literal["uniform", "zeros"] = "uniform") -> np.ndarray:
    flat = np.zeros(layout.size)
    if init == "zeros":
        return flat
    rng = np.random.default_rng(seed)
    for w, b in layout.unpack(flat):
        bound = 1.0 / math.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return flat


def mlp_logits(
    flat: np.ndarray,
    layout: MlpLayout,
    x: np.ndarray,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray, np.ndarray | None]]]:
    caches = []
    h = x
    layers = layout.unpack(flat)
    for w, b in layers[:-1]:
        u = nn.linear(h, w, b)
        mask = nn.dropout_mask(rng, u.shape, rate)
        caches.append((h, u, mask))
        h = nn.apply_mask(nn.relu(u), mask)
    w, b = layers[-1]
    caches.append((h, h, None))
    return nn.linear(h, w, b)[:, 0], caches


def mlp_loss_and_grad(
    flat: np.ndarray,
    layout: MlpLayout,
    x: np.ndarray,
    y: np.ndarray,
    pos_weight: float,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Mean pos-weighted BCE and its gradient over the flat MLP parameters."""
    z, caches = mlp_logits(flat, layout, x, rate, rng)
    n = y.size
    loss = float(np.mean(-(pos_weight * y * log_expit(z) + (1 - y) * log_expit(-z))))
    p = expit(z)
    dz = (pos_weight * y * (p - 1.0) + (1 - y) * p) / n

    grads = np.zeros_like(flat)
    glayers = layout.unpack(grads)
    layers = layout.unpack(flat)
    dh = nn.linear_backward(caches[-1][0], layers[-1][0], dz[:, None], *glayers[-1])
    for (w, _), (gw, gb), (h_in, u, mask) in zip(reversed(layers[:-1]), reversed(glayers[:-1]), reversed(caches[:-1])):
        du = nn.relu_backward(u, nn.apply_mask(dh, mask))
        dh = nn.linear_backward(h_in, w, du, gw, gb)
    return loss, grads


@dataclass
class MlpModel:
    layout: MlpLayout
    params: np.ndarray
    modalities: tuple[Modality, ...]

    def predict_proba(self, batch: ModalityBatch) -> np.ndarray:
        z, _ = mlp_logits(self.params, self.layout, batch.concatenated(self.modalities))
        return expit(z)


def train_mlp_baseline(
    train: ModalityBatch,
    val: ModalityBatch,
    config: MlpBaselineConfig | None = None,
    *,
    modalities: Sequence[Modality] = FUSION_ORDER,
    optim_seed: int = 0,
    init_seed: int = 0,
    recorder: TrainingRecorder | None = None,
    fold: int | None = None,
    threshold: float = 0.5,
) -> FoldResult:
    """[128, 64] ReLU MLP on the concatenated features with pos-weighted BCE, Adam and early stopping."""
    config = config or MlpBaselineConfig()
    modalities = tuple(modalities)
    x_train = train.concatenated(modalities)
    n_0, n_1 = _check_binary(train.labels)
    pos_weight = config.pos_weight if config.pos_weight is not None else n_0 / n_1
    layout = MlpLayout((x_train.shape[1], *config.hidden, 1))
    y_train = train.labels.astype(np.float64)

    def step(flat: np.ndarray, rows: np.ndarray, seed: Sequence[int]) -> tuple[dict[str, float], np.ndarray]:
        rng = np.random.default_rng(list(seed)) if config.dropout > 0 else None
        loss, grads = mlp_loss_and_grad(flat, layout, x_train[rows], y_train[rows], pos_weight, config.dropout, rng)
        n_pos = int(y_train[rows].sum())
        return {
            "focal": loss, "sparsity": 0.0, "total": loss,
            "alpha_0": 1.0, "alpha_1": pos_weight, "n_0": rows.size - n_pos, "n_1": n_pos,
        }, grads

    def predict_fn(flat: np.ndarray, batch: ModalityBatch) -> tuple[np.ndarray, dict[Modality, float]]:
        z, _ = mlp_logits(flat, layout, batch.concatenated(modalities))
        return expit(z), {}

    optim = config.optim(optim_seed)
    result = fit_classifier(
        init_mlp(layout, init_seed, config.init), step, predict_fn, train, val,
        optim, recorder=recorder, fold=fold,
    )
    model = MlpModel(layout=layout, params=result.best_params, modalities=modalities)
    probs = model.predict_proba(val)
    return FoldResult(
        checkpoint=None,
        epoch_log=result.epoch_log,
        step_log=result.step_log,
        report=evaluate_predictions(probs, val.labels, threshold, fold=fold),
        best_epoch=result.best_epoch,
        val_probs=probs,
        fold=fold,
        model_state=model,
    )


def mlp_fold(
    train: ModalityBatch,
    val: ModalityBatch,
    *,
    optim_seed: int,
    init_seed: int,
    modalities: Sequence[Modality] = FUSION_ORDER,
    recorder: TrainingRecorder | None = None,
    fold: int | None = None,
    config: MlpBaselineConfig | None = None,
) -> FoldResult:
    return train_mlp_baseline(
        train, val, config, modalities=modalities, optim_seed=optim_seed, init_seed=init_seed, recorder=recorder, fold=fold
    )
