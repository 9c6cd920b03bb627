from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol


class TrainingRecorder(Protocol):
    """
    Receives callbacks as training progresses so hosts can export step and
    epoch numbers to their own tracking.
    """

    def step_completed(
        self,
        *,
        fold: int | None,
        epoch: int,
        step: int,
        lr: float,
        loss: float,
        grad_norm: float,
    ) -> None: ...

    def epoch_completed(
        self,
        *,
        fold: int | None,
        epoch: int,
        train_loss: float,
        val_composite: float,
        improved: bool,
    ) -> None: ...

    def fold_completed(self, *, fold: int | None, best_epoch: int, composite: float) -> None: ...


class NoOpTrainingRecorder:
    def step_completed(self, **_kwargs) -> None:
        pass

    def epoch_completed(self, **_kwargs) -> None:
        pass

    def fold_completed(self, **_kwargs) -> None:
        pass


@dataclass
class InMemoryRecorder:
    steps: list[dict[str, Any]] = field(default_factory=list)
    epochs: list[dict[str, Any]] = field(default_factory=list)
    folds: list[dict[str, Any]] = field(default_factory=list)

    def step_completed(self, **kwargs) -> None:
        self.steps.append(kwargs)

    def epoch_completed(self, **kwargs) -> None:
        self.epochs.append(kwargs)

    def fold_completed(self, **kwargs) -> None:
        self.folds.append(kwargs)
