"""Named ablation variants and the sweep that cross-validates them on shared folds."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, ItemsView, Iterable, Sequence

import pandas as pd

from safn import training
from safn.core import Modality, Result, SafnError, UsageError
from safn.data import DatasetSchema, RawTable
from safn.logging_context import log_context
from safn.metrics import METRIC_COLUMNS
from safn.model import SafnConfig
from safn.objective import LossConfig
from safn.optim import OptimConfig
from safn.recorder import TrainingRecorder
from safn.training import AblationSpec, CvConfig, CvResult

if TYPE_CHECKING:
    from safn.baselines import MlpBaselineConfig

logger = logging.getLogger(__name__)

FULL_MODEL = AblationSpec()


class AblationRegistry:
    def __init__(self) -> None:
        self._registry: dict[str, AblationSpec] = {}

    def register(self, spec: AblationSpec) -> None:
        self._registry[spec.name] = spec

    def get(self, name: str) -> AblationSpec | None:
        return self._registry.get(name)

    def require(self, name: str) -> AblationSpec:
        spec = self.get(name)
        if spec is None:
            raise UsageError(f"Unknown ablation '{name}'. Known: {', '.join(self._registry)}")
        return spec

    def select(self, names: Iterable[str] | None) -> list[AblationSpec]:
        """Specs for ``names`` in the given order; ``None`` selects everything in registration order."""
        if names is None:
            return list(self._registry.values())
        return [self.require(n) for n in names]

    def items(self) -> ItemsView[str, AblationSpec]:
        return self._registry.items()

    def __len__(self) -> int:
        return len(self._registry)

    def __contains__(self, name: object) -> bool:
        return name in self._registry

    def copy(self) -> AblationRegistry:
        clone = AblationRegistry()
        clone._registry = dict(self._registry)
        return clone


def _without(*dropped: Modality) -> frozenset[Modality]:
    return FULL_MODEL.modality_mask - frozenset(dropped)


registry = AblationRegistry()
for _spec in (
    FULL_MODEL,
    AblationSpec("Plain MLP (concat all features)", model="mlp"),
    AblationSpec("Clinical-only SAFN", modality_mask=frozenset({Modality.CLINICAL})),
    AblationSpec("MRI Cortical Thickness-only SAFN", modality_mask=frozenset({Modality.MRI_CT})),
    AblationSpec("SAFN w/o clinical", modality_mask=_without(Modality.CLINICAL)),
    AblationSpec("SAFN w/o MRI cortical thickness", modality_mask=_without(Modality.MRI_CT)),
    AblationSpec("SAFN w/o cross-attention", disable_cross_attention=True),
    AblationSpec("SAFN w/o gates", disable_gates=True),
    AblationSpec("SAFN (no class-weighting)", disable_class_weighting=True),
):
    registry.register(_spec)

# Supplementary comparator, not part of the default grid.
LOGREG_BASELINE = AblationSpec("Logistic regression (concat all features)", model="logreg")


# ============================================================================
# SWEEP
# ============================================================================

@dataclass
class AblationOutcome:
    spec: AblationSpec
    result: Result[CvResult, SafnError]


def run_ablation_grid(
    table: RawTable,
    schema: DatasetSchema,
    specs: Sequence[AblationSpec],
    model_config: SafnConfig,
    loss_config: LossConfig,
    optim_config: OptimConfig,
    cv: CvConfig | None = None,
    *,
    recorder: TrainingRecorder | None = None,
    baseline_config: MlpBaselineConfig | None = None,
    include_full: bool = True,
) -> list[AblationOutcome]:
    """Cross-validate every spec on the same folds; a failing row is recorded and the rest still run."""
    specs = list(specs)
    if include_full and not any(s.is_full_model for s in specs):
        specs.insert(0, FULL_MODEL)
    outcomes = []
    for spec in specs:
        with log_context(ablation=spec.name):
            try:
                cv_result = training.run_cv(
                    table, schema, model_config, loss_config, optim_config, cv, spec,
                    recorder=recorder, baseline_config=baseline_config,
                )
                outcomes.append(AblationOutcome(spec, Result.Ok(cv_result)))
            except SafnError as e:
                logger.error("Ablation '%s' failed: %s", spec.name, e)
                outcomes.append(AblationOutcome(spec, Result.Error(e)))
    return outcomes


def ablation_frame(outcomes: Sequence[AblationOutcome]) -> pd.DataFrame:
    """One row per ablation: mean and sample SD of every metric, or the error that stopped it."""
    rows = []
    for outcome in outcomes:
        row: dict[str, object] = {"model": outcome.spec.name}
        if outcome.result.ok and outcome.result.value is not None:
            aggregate = outcome.result.value.aggregate
            for name in METRIC_COLUMNS:
                row[name] = aggregate.mean[name]
                row[f"{name}_sd"] = aggregate.sd[name]
            row["status"] = "ok"
            row["error"] = ""
        else:
            row.update({name: float("nan") for name in METRIC_COLUMNS})
            row.update({f"{name}_sd": float("nan") for name in METRIC_COLUMNS})
            row["status"] = "failed"
            row["error"] = str(outcome.result.error)
        rows.append(row)
    columns = ["model", *(c for name in METRIC_COLUMNS for c in (name, f"{name}_sd")), "status", "error"]
    return pd.DataFrame(rows, columns=columns)


def write_ablation_csv(path: str | Path, outcomes: Sequence[AblationOutcome]) -> Path:
    out = Path(path)
    ablation_frame(outcomes).to_csv(out, index=False, float_format="%.10g")
    return out
