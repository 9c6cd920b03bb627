"""Gradient x Input attribution, modality gate shares and pooling attention maps."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
import pandas as pd

from safn.core import FUSION_ORDER, DataError, Modality, NumericError, UsageError
from safn.data import ModalityBatch
from safn.model import SafnParams, backward, forward

logger = logging.getLogger(__name__)

AttributionTarget = Literal["probability", "logit"]


@dataclass(frozen=True)
class AttributionReport:
    features: tuple[tuple[Modality, str], ...]
    raw: np.ndarray
    n_samples: int = 0

    def __post_init__(self) -> None:
        if len(self.features) != self.raw.size:
            raise DataError(f"{len(self.features)} feature names for {self.raw.size} attributions")
        if np.any(self.raw < 0):
            raise NumericError("Accumulated attribution magnitudes must be non-negative")

    @property
    def percent(self) -> np.ndarray:
        total = float(self.raw.sum())
        if total <= 0.0:
            raise NumericError("Every attribution is zero; percentages are undefined")
        return self.raw / total * 100.0

    @property
    def ranking(self) -> list[int]:
        """Feature indices by descending magnitude, ties by feature name."""
        return sorted(range(len(self.features)), key=lambda i: (-float(self.raw[i]), self.features[i][1]))

    def merge(self, other: AttributionReport) -> AttributionReport:
        if self.features != other.features:
            raise DataError("Cannot merge attribution reports over different features")
        return AttributionReport(self.features, self.raw + other.raw, self.n_samples + other.n_samples)

    def to_frame(self) -> pd.DataFrame:
        percent = self.percent
        rank = np.empty(len(self.features), dtype=np.int64)
        rank[self.ranking] = np.arange(1, len(self.features) + 1)
        return pd.DataFrame({
            "feature": [name for _, name in self.features],
            "modality": [m.value for m, _ in self.features],
            "raw": self.raw,
            "percent": percent,
            "rank": rank,
        }).sort_values("rank", kind="stable")


@dataclass(frozen=True)
class GateReport:
    modalities: tuple[Modality, ...]
    raw: np.ndarray

    @property
    def shares(self) -> np.ndarray:
        return self.raw / float(self.raw.sum())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "modality": [m.value for m in self.modalities],
            "mean_gate": self.raw,
            "contribution_percent": self.shares * 100.0,
        })


def attribution_from_gradients(
    inputs: Mapping[Modality, np.ndarray],
    gradients: Mapping[Modality, np.ndarray],
    feature_names: Mapping[Modality, Sequence[str]],
) -> AttributionReport:
    """Sum over samples of |grad * x| per feature, in fusion order."""
    features: list[tuple[Modality, str]] = []
    raw: list[np.ndarray] = []
    n_samples = 0
    for m in FUSION_ORDER:
        names = tuple(feature_names.get(m, ()))
        if not names:
            continue
        x = np.asarray(inputs[m], dtype=np.float64)
        g = np.asarray(gradients.get(m, np.zeros_like(x)), dtype=np.float64)
        if x.shape[1] != len(names):
            raise DataError(f"{m.value} has {x.shape[1]} inputs but {len(names)} feature names")
        features.extend((m, name) for name in names)
        raw.append(np.abs(g * x).sum(axis=0))
        n_samples = x.shape[0]
    return AttributionReport(tuple(features), np.concatenate(raw), n_samples)


def _names_for(batch: ModalityBatch) -> dict[Modality, tuple[str, ...]]:
    names = {m: tuple(batch.feature_names.get(m, ())) for m in FUSION_ORDER}
    for m, x in batch.blocks.items():
        if not names[m] and x.shape[1]:
            names[m] = tuple(f"{m.value}_{i}" for i in range(x.shape[1]))
    return names


def grad_x_input(
    params: SafnParams,
    batch: ModalityBatch,
    target: AttributionTarget = "probability",
    chunk_size: int = 32,
) -> AttributionReport:
    """Eval-mode Gradient x Input of the predicted probability (or logit), accumulated as magnitudes."""
    if len(batch) == 0:
        raise DataError("Attribution needs at least one sample")
    if target not in ("probability", "logit"):
        raise UsageError(f"Unknown attribution target '{target}'")
    names = _names_for(batch)
    report: AttributionReport | None = None
    for start in range(0, len(batch), chunk_size):
        chunk = batch.subset(np.arange(start, min(len(batch), start + chunk_size)))
        trace = forward(chunk, params)
        dlogit = trace.prob * (1.0 - trace.prob) if target == "probability" else np.ones_like(trace.logit)
        grads = backward(trace, dlogit, params)
        part = attribution_from_gradients(chunk.blocks, grads.inputs, names)
        part = AttributionReport(part.features, part.raw, len(chunk))
        report = part if report is None else report.merge(part)
    assert report is not None
    return report


def accumulate_attributions(reports: Sequence[AttributionReport]) -> AttributionReport:
    if not reports:
        raise DataError("No attribution reports to accumulate")
    total = reports[0]
    for report in reports[1:]:
        total = total.merge(report)
    return total


def top_k_features(report: AttributionReport, k: int = 20) -> list[tuple[Modality, str, float]]:
    if not 1 <= k <= len(report.features):
        raise UsageError(f"k must lie in [1, {len(report.features)}], got {k}")
    percent = report.percent
    return [(*report.features[i], float(percent[i])) for i in report.ranking[:k]]


def gate_contributions(
    gates: Sequence[np.ndarray] | np.ndarray,
    modalities: Sequence[Modality] = FUSION_ORDER,
    weights: Sequence[float] | None = None,
) -> GateReport:
    """Mean gate per modality over every sample of every fold, with shares raw_j / sum(raw).

    ``weights`` (one per row) turns per-fold mean rows back into a per-sample mean.
    """
    blocks = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in (gates if isinstance(gates, (list, tuple)) else [gates])]
    stacked = np.concatenate(blocks, axis=0)
    if stacked.shape[0] == 0:
        raise DataError("Gate contributions need at least one sample")
    if stacked.shape[1] != len(modalities):
        raise DataError(f"Gate vectors have {stacked.shape[1]} entries for {len(modalities)} modalities")
    if weights is not None and len(weights) != stacked.shape[0]:
        raise DataError(f"{len(weights)} weights for {stacked.shape[0]} gate rows")
    raw = np.average(stacked, axis=0, weights=weights)
    if raw.sum() <= 0.0:
        raise NumericError("Gate means sum to zero")
    return GateReport(tuple(modalities), raw)


def pooling_attention(params: SafnParams, batch: ModalityBatch, chunk_size: int = 32) -> dict[Modality, pd.Series]:
    """Mean attention-pooling weight per token feature for each tokenized modality."""
    names = _names_for(batch)
    sums: dict[Modality, np.ndarray] = {}
    for start in range(0, len(batch), chunk_size):
        trace = forward(batch.subset(np.arange(start, min(len(batch), start + chunk_size))), params)
        for m, w in trace.pool_weights.items():
            sums[m] = sums.get(m, 0.0) + w.sum(axis=0)
    return {m: pd.Series(total / len(batch), index=list(names[m]), name=m.value) for m, total in sums.items()}


def write_attribution_csv(path: str | Path, report: AttributionReport) -> Path:
    out = Path(path)
    report.to_frame().to_csv(out, index=False, float_format="%.10g")
    return out


def write_gate_csv(path: str | Path, report: GateReport) -> Path:
    out = Path(path)
    report.to_frame().to_csv(out, index=False, float_format="%.10g")
    return out
