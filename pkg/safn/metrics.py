"""Evaluation metrics: confusion counts, thresholded scores, ROC/PR curves, threshold sweep and fold averaging.

A sample is predicted positive when ``prob >= threshold``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, precision_recall_curve, roc_auc_score, roc_curve

from safn.core import DataError, Modality, NumericError

logger = logging.getLogger(__name__)

THRESHOLD_GRID = np.arange(5, 96) / 100.0
METRIC_COLUMNS = ("accuracy", "balanced_accuracy", "roc_auc", "pr_auc", "precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError("Confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_array(self) -> np.ndarray:
        """[[tn, fp], [fn, tp]], rows are true labels."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]], dtype=np.float64)


@dataclass(frozen=True)
class ThresholdMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    balanced_accuracy: float
    specificity: float
    degenerate: frozenset[str] = frozenset()


@dataclass(frozen=True)
class CurveData:
    x: np.ndarray
    y: np.ndarray
    auc: float
    kind: str = "roc"

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))

    def to_frame(self) -> pd.DataFrame:
        names = ("fpr", "tpr") if self.kind == "roc" else ("recall", "precision")
        return pd.DataFrame({names[0]: self.x, names[1]: self.y})


@dataclass
class FoldReport:
    accuracy: float
    balanced_accuracy: float
    roc_auc: float
    pr_auc: float
    precision: float
    recall: float
    f1: float
    confusion: ConfusionMatrix
    best_f1_threshold: float
    roc_curve: CurveData | None
    pr_curve: CurveData | None
    gate_means: dict[Modality, float] = field(default_factory=dict)
    threshold: float = 0.5
    at_best_threshold: ThresholdMetrics | None = None
    degenerate: frozenset[str] = frozenset()
    fold: int | None = None

    def metric_row(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in METRIC_COLUMNS}


def _validate(probs: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.size == 0:
        raise DataError("Metrics need at least one sample")
    if p.shape != y.shape:
        raise DataError(f"Got {p.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise DataError("Labels must be 0/1")
    return p, y


def confusion(probs: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray, threshold: float = 0.5) -> ConfusionMatrix:
    p, y = _validate(probs, labels)
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num: float, den: float, name: str, degenerate: set[str]) -> float:
    if den == 0:
        degenerate.add(name)
        return 0.0
    return num / den


def thresholded_metrics(cm: ConfusionMatrix) -> ThresholdMetrics:
    """Zero-denominator ratios are reported as 0 and named in ``degenerate``."""
    if cm.total == 0:
        raise DataError("Confusion matrix is empty")
    degenerate: set[str] = set()
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", degenerate)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", degenerate)
    specificity = _ratio(cm.tn, cm.tn + cm.fp, "specificity", degenerate)
    f1 = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1", degenerate)
    return ThresholdMetrics(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=precision,
        recall=recall,
        f1=f1,
        balanced_accuracy=(recall + specificity) / 2.0,
        specificity=specificity,
        degenerate=frozenset(degenerate),
    )


def roc_auc(probs: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> tuple[float, CurveData]:
    """Area under the ROC curve, ties counted as half; the curve has one point per distinct score."""
    p, y = _validate(probs, labels)
    if np.unique(y).size < 2:
        raise NumericError("ROC-AUC is undefined for a single-class label set")
    auc = float(roc_auc_score(y, p))
    fpr, tpr, _ = roc_curve(y, p, drop_intermediate=False)
    return auc, CurveData(x=fpr, y=tpr, auc=auc, kind="roc")


def pr_auc(probs: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> tuple[float, CurveData]:
    """Average precision: sum over distinct thresholds of (recall_i - recall_{i-1}) * precision_i."""
    p, y = _validate(probs, labels)
    if not np.any(y == 1):
        raise NumericError("PR-AUC is undefined without positive labels")
    ap = float(average_precision_score(y, p))
    precision, recall, _ = precision_recall_curve(y, p)
    # reversed so recall rises from the (0, 1) anchor
    return ap, CurveData(x=recall[::-1].copy(), y=precision[::-1].copy(), auc=ap, kind="pr")


def best_f1_threshold(probs: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> tuple[float, float]:
    """Smallest grid threshold in [0.05, 0.95] (step 0.01) reaching the maximal F1."""
    p, y = _validate(probs, labels)
    scores = np.array([thresholded_metrics(confusion(p, y, t)).f1 for t in THRESHOLD_GRID])
    best = int(np.argmax(scores))
    return float(THRESHOLD_GRID[best]), float(scores[best])


def _collapse_duplicates(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # keep the last y seen at each x
    keep = np.append(x[1:] != x[:-1], True)
    return x[keep], y[keep]


def mean_curve(curves: Sequence[CurveData], grid_size: int = 101) -> CurveData:
    """Interpolate each curve onto a uniform x grid and average pointwise; AUC is the mean fold AUC."""
    if not curves:
        raise DataError("mean_curve needs at least one curve")
    kind = curves[0].kind
    grid = np.linspace(0.0, 1.0, grid_size)
    stacked = []
    for curve in curves:
        x, y = _collapse_duplicates(np.asarray(curve.x), np.asarray(curve.y))
        stacked.append(np.interp(grid, x, y))
    y_mean = np.mean(stacked, axis=0)
    if kind == "roc":
        y_mean[0] = 0.0
        y_mean[-1] = 1.0
    return CurveData(x=grid, y=y_mean, auc=float(np.mean([c.auc for c in curves])), kind=kind)


def evaluate_predictions(
    probs: Sequence[float] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    threshold: float = 0.5,
    gate_means: Mapping[Modality, float] | None = None,
    fold: int | None = None,
) -> FoldReport:
    """Everything a fold reports, at ``threshold`` and at the fold's best-F1 threshold."""
    p, y = _validate(probs, labels)
    cm = confusion(p, y, threshold)
    scores = thresholded_metrics(cm)
    degenerate = set(scores.degenerate)

    auc, roc = float("nan"), None
    try:
        auc, roc = roc_auc(p, y)
    except NumericError:
        degenerate.add("roc_auc")
        logger.warning("ROC-AUC undefined: validation labels contain a single class")
    ap, pr = float("nan"), None
    try:
        ap, pr = pr_auc(p, y)
    except NumericError:
        degenerate.add("pr_auc")

    best_t, _ = best_f1_threshold(p, y)
    return FoldReport(
        accuracy=scores.accuracy,
        balanced_accuracy=scores.balanced_accuracy,
        roc_auc=auc,
        pr_auc=ap,
        precision=scores.precision,
        recall=scores.recall,
        f1=scores.f1,
        confusion=cm,
        best_f1_threshold=best_t,
        roc_curve=roc,
        pr_curve=pr,
        gate_means=dict(gate_means or {}),
        threshold=threshold,
        at_best_threshold=thresholded_metrics(confusion(p, y, best_t)),
        degenerate=frozenset(degenerate),
        fold=fold,
    )


@dataclass
class AggregateReport:
    mean: dict[str, float]
    sd: dict[str, float]
    confusion: np.ndarray
    roc_curve: CurveData | None
    pr_curve: CurveData | None
    gate_means: dict[Modality, float]
    best_f1_threshold: float
    folds: list[FoldReport]


def _sample_sd(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


def aggregate_reports(reports: Sequence[FoldReport]) -> AggregateReport:
    """Mean and sample SD per metric, averaged confusion matrix, mean curves and mean gates."""
    if not reports:
        raise DataError("Nothing to aggregate")
    mean: dict[str, float] = {}
    sd: dict[str, float] = {}
    for name in METRIC_COLUMNS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        values = values[~np.isnan(values)]
        mean[name] = float(values.mean()) if values.size else math.nan
        sd[name] = _sample_sd(values) if values.size else math.nan

    rocs = [r.roc_curve for r in reports if r.roc_curve is not None]
    prs = [r.pr_curve for r in reports if r.pr_curve is not None]
    modalities = [m for m in reports[0].gate_means]
    return AggregateReport(
        mean=mean,
        sd=sd,
        confusion=np.mean([r.confusion.as_array() for r in reports], axis=0),
        roc_curve=mean_curve(rocs) if rocs else None,
        pr_curve=mean_curve(prs) if prs else None,
        gate_means={m: float(np.mean([r.gate_means[m] for r in reports])) for m in modalities},
        best_f1_threshold=float(np.mean([r.best_f1_threshold for r in reports])),
        folds=list(reports),
    )


def metrics_frame(aggregate: AggregateReport, label: str = "SAFN") -> pd.DataFrame:
    """One row per fold plus one aggregate row with ``mean ± sd`` strings alongside the numbers."""
    rows = []
    for i, report in enumerate(aggregate.folds):
        row: dict[str, object] = {"model": label, "fold": report.fold if report.fold is not None else i}
        row.update(report.metric_row())
        rows.append(row)
    summary: dict[str, object] = {"model": label, "fold": "mean"}
    for name in METRIC_COLUMNS:
        summary[name] = aggregate.mean[name]
        summary[f"{name}_sd"] = aggregate.sd[name]
    rows.append(summary)
    return pd.DataFrame(rows)


def format_mean_sd(aggregate: AggregateReport, name: str, digits: int = 2) -> str:
    return f"{aggregate.mean[name]:.{digits}f} ± {aggregate.sd[name]:.{digits}f}"


def write_metrics_csv(path: str | Path, aggregate: AggregateReport, label: str = "SAFN") -> Path:
    out = Path(path)
    metrics_frame(aggregate, label).to_csv(out, index=False, float_format="%.10g")
    return out


def write_curve_csv(path: str | Path, curve: CurveData) -> Path:
    out = Path(path)
    curve.to_frame().to_csv(out, index=False, float_format="%.10g")
    return out


def write_confusion_csv(path: str | Path, matrix: np.ndarray) -> Path:
    out = Path(path)
    frame = pd.DataFrame(matrix, index=["true_hc", "true_pd"], columns=["pred_hc", "pred_pd"])
    frame.to_csv(out, float_format="%.10g")
    return out
