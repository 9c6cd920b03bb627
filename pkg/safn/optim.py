"""AdamW, the warmup-cosine schedule, global-norm clipping and parameter EMA over flat vectors."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from safn.core import NumericError, ShapeError, UsageError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    ema_decay: float | None = 0.999
    epochs: int = 60
    patience: int = 12
    batch_size: int = 64
    warmup_fraction: float = 0.10
    threshold: float = 0.5
    seed: int = 0
    micro_batch: int | None = 16
    schedule: Literal["warmup_cosine", "constant"] = "warmup_cosine"

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.adam_eps <= 0:
            raise UsageError("lr and adam_eps must be positive")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise UsageError("beta1 and beta2 must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise UsageError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay <= 1.0:
            raise UsageError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be positive")
        if not 1 <= self.patience <= self.epochs:
            raise UsageError(f"patience must lie in [1, epochs], got {self.patience}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise UsageError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if not 0.0 < self.threshold < 1.0:
            raise UsageError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise UsageError(f"micro_batch must be positive, got {self.micro_batch}")
        if self.schedule not in ("warmup_cosine", "constant"):
            raise UsageError(f"Unknown schedule '{self.schedule}'")


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    ema: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def for_params(cls, flat: np.ndarray, with_ema: bool = True) -> OptimState:
        return cls(
            m=np.zeros_like(flat),
            v=np.zeros_like(flat),
            ema=flat.copy() if with_ema else None,
        )


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: OptimState,
    lr_t: float,
    config: OptimConfig,
) -> np.ndarray:
    """Decoupled weight decay followed by a bias-corrected Adam update, in place."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(f"Layout mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.step += 1
    t = state.step
    if config.weight_decay:
        params *= 1.0 - lr_t * config.weight_decay
    state.m *= config.beta1
    state.m += (1.0 - config.beta1) * grads
    state.v *= config.beta2
    state.v += (1.0 - config.beta2) * grads * grads
    m_hat = state.m / (1.0 - config.beta1**t)
    v_hat = state.v / (1.0 - config.beta2**t)
    params -= lr_t * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params


def global_norm(grads: np.ndarray) -> float:
    return float(np.linalg.norm(grads))


def clip_gradients(grads: np.ndarray, clip_norm: float | None) -> tuple[np.ndarray, float]:
    """Scale ``grads`` in place so the global L2 norm is at most ``clip_norm``; returns the pre-clip norm."""
    if not np.all(np.isfinite(grads)):
        bad = int(np.sum(~np.isfinite(grads)))
        raise NumericError(f"{bad} non-finite gradient entries")
    norm = global_norm(grads)
    if clip_norm is not None and norm > clip_norm:
        grads *= clip_norm / norm
    return grads, norm


def warmup_steps(total_steps: int, config: OptimConfig) -> int:
    w = max(1, round(config.warmup_fraction * total_steps))
    if total_steps > 1:
        w = min(w, total_steps - 1)
    return w


def lr_at(step: int, total_steps: int, config: OptimConfig) -> float:
    """Linear warmup to ``lr`` ending at step ``w - 1``, then cosine decay reaching 0 on the last step."""
    if total_steps < 1 or not 0 <= step < total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps})")
    if config.schedule == "constant" or total_steps == 1:
        return config.lr
    w = warmup_steps(total_steps, config)
    if step < w:
        return config.lr * (step + 1) / w
    progress = (step - w + 1) / (total_steps - w)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_update(shadow: np.ndarray, params: np.ndarray, decay: float) -> np.ndarray:
    if shadow.shape != params.shape:
        raise ShapeError(f"EMA shadow {shadow.shape} does not match params {params.shape}")
    if decay >= 1.0:
        return shadow
    shadow *= decay
    shadow += (1.0 - decay) * params
    return shadow
