"""Fold training, cross-validation and ablation wiring.

One optimiser loop (:func:`fit_classifier`) serves every trainable model: a
model contributes a ``step`` callable (loss and flat gradient for a mini-batch)
and a ``predict`` callable (eval-mode probabilities for a batch). The loop owns
shuffling, the learning-rate schedule, clipping, AdamW, EMA, validation and
early stopping.
"""
from __future__ import annotations

import asyncio
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Literal, NamedTuple, Sequence

import numpy as np
import pandas as pd

from safn.checkpoint import Checkpoint
from safn.core import FUSION_ORDER, DataError, Modality, NumericError, UsageError, parse_modality
from safn.data import (
    DatasetSchema,
    FittedPreprocessor,
    ModalityBatch,
    RawTable,
    fit_preprocessor,
    flag_outliers,
    prepare_table,
    to_batch,
)
from safn.logging_context import log_context
from safn.metrics import AggregateReport, FoldReport, aggregate_reports, evaluate_predictions, roc_auc, confusion, thresholded_metrics
from safn.model import ModelWiring, SafnConfig, SafnParams, backward, build_layout, forward, init_params, predict
from safn.objective import LossConfig, batch_class_weights, loss_gradients, total_loss
from safn.optim import OptimConfig, OptimState, adamw_step, clip_gradients, ema_update, lr_at
from safn.recorder import NoOpTrainingRecorder, TrainingRecorder
from safn.splits import FoldPlan, make_folds

if TYPE_CHECKING:
    from safn.baselines import MlpBaselineConfig

logger = logging.getLogger(__name__)

EPOCH_LOG_COLUMNS = ("epoch", "train_loss", "val_composite", "val_auroc", "val_balacc", "val_f1", "lr", "stopped_flag")
STEP_LOG_COLUMNS = ("epoch", "step", "focal", "sparsity", "total", "alpha_0", "alpha_1", "n_0", "n_1")

ModelKind = Literal["safn", "mlp", "logreg"]


# ============================================================================
# COMPOSITE VALIDATION METRIC
# ============================================================================

class CompositeScore(NamedTuple):
    value: float
    roc_auc: float
    balanced_accuracy: float
    f1: float
    auroc_defined: bool


def composite_score(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> CompositeScore:
    scores = thresholded_metrics(confusion(probs, labels, threshold))
    try:
        auc, _ = roc_auc(probs, labels)
    except NumericError:
        logger.warning("Validation set holds one class; composite uses balanced accuracy and F1 only")
        value = (scores.balanced_accuracy + scores.f1) / 2.0
        return CompositeScore(value, math.nan, scores.balanced_accuracy, scores.f1, False)
    value = (auc + scores.balanced_accuracy + scores.f1) / 3.0
    return CompositeScore(value, auc, scores.balanced_accuracy, scores.f1, True)


def composite_metric(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Mean of ROC-AUC, balanced accuracy and F1 at ``threshold``."""
    return composite_score(probs, labels, threshold).value


# ============================================================================
# ABLATIONS
# ============================================================================

@dataclass(frozen=True)
class AblationSpec:
    name: str = "SAFN (full)"
    modality_mask: frozenset[Modality] = frozenset(FUSION_ORDER)
    disable_cross_attention: bool = False
    disable_gates: bool = False
    disable_class_weighting: bool = False
    keep_focal: bool = False
    model: ModelKind = "safn"

    def __post_init__(self) -> None:
        mask = frozenset(parse_modality(m) for m in self.modality_mask)
        object.__setattr__(self, "modality_mask", mask)
        if not mask:
            raise UsageError(f"Ablation '{self.name}' has an empty modality mask")
        if self.model not in ("safn", "mlp", "logreg"):
            raise UsageError(f"Unknown model kind '{self.model}'")

    @property
    def is_full_model(self) -> bool:
        return (
            self.model == "safn"
            and self.modality_mask == frozenset(FUSION_ORDER)
            and not (self.disable_cross_attention or self.disable_gates or self.disable_class_weighting)
        )


def apply_ablation(spec: AblationSpec | None, loss: LossConfig) -> tuple[ModelWiring, LossConfig]:
    """Model wiring and loss settings for ``spec``; ``None`` means the full model."""
    if spec is None:
        return ModelWiring(), loss
    wiring = ModelWiring(
        modalities=tuple(m for m in FUSION_ORDER if m in spec.modality_mask),
        cross_attention=not spec.disable_cross_attention,
        gates=not spec.disable_gates,
    )
    if spec.disable_class_weighting:
        loss = dataclasses.replace(loss, class_weighting=False, gamma=loss.gamma if spec.keep_focal else 0.0)
    return wiring, loss


# ============================================================================
# GENERIC LOOP
# ============================================================================

StepFn = Callable[[np.ndarray, np.ndarray, Sequence[int]], tuple[dict[str, float], np.ndarray]]
PredictFn = Callable[[np.ndarray, ModalityBatch], tuple[np.ndarray, dict[Modality, float]]]


@dataclass
class LoopResult:
    best_params: np.ndarray
    best_epoch: int
    best_score: CompositeScore
    epoch_log: pd.DataFrame
    step_log: pd.DataFrame
    gate_means: dict[Modality, float] = field(default_factory=dict)


def fit_classifier(
    initial: np.ndarray,
    step: StepFn,
    predict_fn: PredictFn,
    train: ModalityBatch,
    val: ModalityBatch,
    optim: OptimConfig,
    *,
    recorder: TrainingRecorder | None = None,
    fold: int | None = None,
) -> LoopResult:
    """Mini-batch training with early stopping on the validation composite of the evaluated weights.

    Evaluated weights are the EMA shadow when ``optim.ema_decay`` is set, the raw
    parameters otherwise. The schedule length is fixed up front at
    ``epochs * ceil(n_train / batch_size)`` steps.
    """
    recorder = recorder or NoOpTrainingRecorder()
    n = len(train)
    if n == 0 or len(val) == 0:
        raise DataError("Training and validation sets must be nonempty")

    params = np.array(initial, dtype=np.float64)
    state = OptimState.for_params(params, with_ema=optim.ema_decay is not None)
    shuffle_rng = np.random.default_rng([optim.seed, 0])
    steps_per_epoch = math.ceil(n / optim.batch_size)
    total_steps = optim.epochs * steps_per_epoch

    best: np.ndarray | None = None
    best_score: CompositeScore | None = None
    best_gates: dict[Modality, float] = {}
    best_epoch = -1
    since_best = 0
    epoch_rows: list[dict[str, Any]] = []
    step_rows: list[dict[str, Any]] = []

    for epoch in range(optim.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses: list[float] = []
        lr = 0.0
        for s in range(steps_per_epoch):
            global_step = epoch * steps_per_epoch + s
            rows = order[s * optim.batch_size : (s + 1) * optim.batch_size]
            lr = lr_at(global_step, total_steps, optim)
            breakdown, grads = step(params, rows, (optim.seed, 1, global_step))
            grads, grad_norm = clip_gradients(grads, optim.clip_norm)
            adamw_step(params, grads, state, lr, optim)
            if state.ema is not None and optim.ema_decay is not None:
                ema_update(state.ema, params, optim.ema_decay)
            epoch_losses.append(breakdown["total"])
            step_rows.append({"epoch": epoch, "step": global_step, **breakdown})
            recorder.step_completed(
                fold=fold, epoch=epoch, step=global_step, lr=lr, loss=breakdown["total"], grad_norm=grad_norm
            )

        evaluated = state.ema if state.ema is not None else params
        probs, gates = predict_fn(evaluated, val)
        score = composite_score(probs, val.labels, optim.threshold)
        improved = best_score is None or score.value > best_score.value
        if improved:
            best, best_score, best_gates, best_epoch = evaluated.copy(), score, gates, epoch
            since_best = 0
        else:
            since_best += 1
        stopped = since_best >= optim.patience
        train_loss = float(np.mean(epoch_losses))
        epoch_rows.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_composite": score.value,
            "val_auroc": score.roc_auc,
            "val_balacc": score.balanced_accuracy,
            "val_f1": score.f1,
            "lr": lr,
            "stopped_flag": int(stopped),
        })
        recorder.epoch_completed(
            fold=fold, epoch=epoch, train_loss=train_loss, val_composite=score.value, improved=improved
        )
        logger.debug("epoch %d loss=%.5f composite=%.4f%s", epoch, train_loss, score.value, " *" if improved else "")
        if stopped:
            logger.info("Early stop after epoch %d (best epoch %d)", epoch, best_epoch)
            break

    assert best is not None and best_score is not None
    recorder.fold_completed(fold=fold, best_epoch=best_epoch, composite=best_score.value)
    return LoopResult(
        best_params=best,
        best_epoch=best_epoch,
        best_score=best_score,
        epoch_log=pd.DataFrame(epoch_rows, columns=list(EPOCH_LOG_COLUMNS)),
        step_log=pd.DataFrame(step_rows),
        gate_means=best_gates,
    )


# ============================================================================
# SAFN FOLD
# ============================================================================

def _chunks(rows: np.ndarray, size: int | None) -> list[np.ndarray]:
    if size is None or size >= rows.size:
        return [rows]
    return [rows[i : i + size] for i in range(0, rows.size, size)]


def safn_step_fn(
    params_template: SafnParams,
    train: ModalityBatch,
    loss: LossConfig,
    micro_batch: int | None,
) -> StepFn:
    """Loss and gradient of the SAFN objective over a mini-batch.

    A mini-batch is processed in micro-batches; class weights come from the
    whole mini-batch and every chunk divides by the full batch size, so the
    accumulated gradient equals the single-pass gradient.
    """
    layout = params_template.layout
    gated = layout.wiring.gates

    def step(flat: np.ndarray, rows: np.ndarray, seed: Sequence[int]) -> tuple[dict[str, float], np.ndarray]:
        params = SafnParams(layout, flat)
        labels = train.labels[rows]
        weights = batch_class_weights(labels, loss)
        grads = np.zeros_like(flat)
        probs = np.empty(rows.size, dtype=np.float64)
        alphas = np.empty((rows.size, len(layout.wiring.modalities)), dtype=np.float64)
        offset = 0
        for i, chunk in enumerate(_chunks(rows, micro_batch)):
            trace = forward(train.subset(chunk), params, train_mode=True, dropout_seed=(*seed, i))
            dlogit, dalpha = loss_gradients(
                trace.prob, train.labels[chunk], trace.alpha if gated else None, loss,
                weights=weights, batch_size=rows.size,
            )
            grads += backward(trace, dlogit, params, dalpha).params.flat
            probs[offset : offset + chunk.size] = trace.prob
            alphas[offset : offset + chunk.size] = trace.alpha
            offset += chunk.size
        breakdown = total_loss(probs, labels, alphas if gated else None, loss)
        return breakdown.as_row(), grads

    return step


def safn_predict_fn(layout_params: SafnParams, chunk_size: int = 32) -> PredictFn:
    layout = layout_params.layout

    def predict_fn(flat: np.ndarray, batch: ModalityBatch) -> tuple[np.ndarray, dict[Modality, float]]:
        probs, alphas = predict(SafnParams(layout, flat), batch, chunk_size)
        gates = {m: float(alphas[:, j].mean()) for j, m in enumerate(layout.wiring.modalities)}
        return probs, gates

    return predict_fn


@dataclass
class FoldResult:
    checkpoint: Checkpoint | None
    epoch_log: pd.DataFrame
    step_log: pd.DataFrame
    report: FoldReport
    best_epoch: int
    val_probs: np.ndarray
    fold: int | None = None
    model_state: Any = None


def train_one_fold(
    train: ModalityBatch,
    val: ModalityBatch,
    model_config: SafnConfig,
    loss_config: LossConfig,
    optim_config: OptimConfig,
    ablation: AblationSpec | None = None,
    *,
    init_seed: int | None = None,
    preprocessor: FittedPreprocessor | None = None,
    schema: DatasetSchema | None = None,
    recorder: TrainingRecorder | None = None,
    fold: int | None = None,
) -> FoldResult:
    """Train SAFN on one split; returns the best-epoch EMA checkpoint, logs and the validation report."""
    wiring, loss = apply_ablation(ablation, loss_config)
    widths = {m: int(x.shape[1]) for m, x in train.blocks.items()}
    layout = build_layout(model_config, widths, wiring)
    seed = optim_config.seed if init_seed is None else init_seed
    initial = init_params(layout, seed)
    logger.info(
        "Training SAFN fold=%s params=%d train=%d val=%d modalities=%s",
        fold, layout.size, len(train), len(val), ",".join(m.value for m in wiring.modalities),
    )

    result = fit_classifier(
        initial.flat,
        safn_step_fn(initial, train, loss, optim_config.micro_batch),
        safn_predict_fn(initial),
        train,
        val,
        optim_config,
        recorder=recorder,
        fold=fold,
    )
    best = SafnParams(layout, result.best_params)
    probs, _ = predict(best, val)
    report = evaluate_predictions(probs, val.labels, optim_config.threshold, gate_means=result.gate_means, fold=fold)
    checkpoint = Checkpoint(
        params=best,
        feature_names=dict(train.feature_names),
        preprocessor=preprocessor,
        schema=schema,
        metadata={
            "fold": fold,
            "best_epoch": result.best_epoch,
            "val_composite": result.best_score.value,
            "ablation": None if ablation is None else ablation.name,
            "threshold": optim_config.threshold,
        },
    )
    return FoldResult(
        checkpoint=checkpoint,
        epoch_log=result.epoch_log,
        step_log=result.step_log,
        report=report,
        best_epoch=result.best_epoch,
        val_probs=probs,
        fold=fold,
    )


# ============================================================================
# CROSS-VALIDATION
# ============================================================================

@dataclass(frozen=True)
class CvConfig:
    k: int = 5
    grouped: bool = True
    seed: int = 0
    missingness_threshold: float = 0.20
    categorical_encoding: Literal["onehot", "index"] = "onehot"
    jobs: int | None = None

    def __post_init__(self) -> None:
        if self.k < 2:
            raise UsageError(f"k must be at least 2, got {self.k}")
        if self.jobs is not None and self.jobs < 1:
            raise UsageError(f"jobs must be positive, got {self.jobs}")

    @property
    def resolved_jobs(self) -> int:
        return self.jobs if self.jobs is not None else (os.cpu_count() or 1)


@dataclass
class CvResult:
    folds: list[FoldResult]
    aggregate: AggregateReport
    plan: FoldPlan
    dropped_columns: list[str]
    ablation: AblationSpec | None = None

    @property
    def reports(self) -> list[FoldReport]:
        return [f.report for f in self.folds]


def fold_seeds(master_seed: int, k: int) -> list[tuple[int, int]]:
    """(init seed, optimiser seed) per fold, spawned from the master seed."""
    states = [child.generate_state(2) for child in np.random.SeedSequence(master_seed).spawn(k)]
    return [(int(state[0]), int(state[1])) for state in states]


def _prepare_fold(
    table: RawTable,
    schema: DatasetSchema,
    plan: FoldPlan,
    fold: int,
    cv: CvConfig,
) -> tuple[ModalityBatch, ModalityBatch, FittedPreprocessor]:
    train_idx, val_idx = plan.split(fold)
    train_table = table.subset(train_idx)
    prep = fit_preprocessor(train_table, schema, cv.categorical_encoding)
    flag_outliers(train_table, schema)
    return to_batch(train_table, prep, schema), to_batch(table.subset(val_idx), prep, schema), prep


def _run_fold(
    table: RawTable,
    schema: DatasetSchema,
    plan: FoldPlan,
    fold: int,
    model_config: SafnConfig,
    loss_config: LossConfig,
    optim_config: OptimConfig,
    cv: CvConfig,
    ablation: AblationSpec | None,
    recorder: TrainingRecorder | None,
    baseline_config: MlpBaselineConfig | None = None,
) -> FoldResult:
    init_seed, optim_seed = fold_seeds(cv.seed, cv.k)[fold]
    with log_context(fold=fold, ablation=None if ablation is None else ablation.name):
        train, val, prep = _prepare_fold(table, schema, plan, fold, cv)
        optim = dataclasses.replace(optim_config, seed=optim_seed)
        kind = "safn" if ablation is None else ablation.model
        if kind == "safn":
            return train_one_fold(
                train, val, model_config, loss_config, optim, ablation,
                init_seed=init_seed, preprocessor=prep, schema=schema, recorder=recorder, fold=fold,
            )
        from safn import baselines

        modalities = FUSION_ORDER if ablation is None else tuple(m for m in FUSION_ORDER if m in ablation.modality_mask)
        if kind == "mlp":
            return baselines.mlp_fold(train, val, optim_seed=optim_seed, init_seed=init_seed,
                                      modalities=modalities, recorder=recorder, fold=fold, config=baseline_config)
        return baselines.logreg_fold(train, val, modalities=modalities, seed=init_seed, fold=fold)


async def run_cv_async(
    table: RawTable,
    schema: DatasetSchema,
    model_config: SafnConfig,
    loss_config: LossConfig,
    optim_config: OptimConfig,
    cv: CvConfig | None = None,
    ablation: AblationSpec | None = None,
    *,
    recorder: TrainingRecorder | None = None,
    baseline_config: MlpBaselineConfig | None = None,
) -> CvResult:
    """Cross-validate with up to ``cv.jobs`` folds training at once in worker threads.

    Every fold derives its seeds from ``cv.seed`` and its index alone, so the
    result does not depend on the degree of concurrency.
    """
    cv = cv or CvConfig()
    cleaned, reduced, dropped = prepare_table(table, schema, cv.missingness_threshold)
    plan = make_folds(cleaned.labels, cleaned.subject_ids, cv.k, cv.seed, grouped=cv.grouped)
    semaphore = asyncio.Semaphore(cv.resolved_jobs)

    async def run(fold: int) -> FoldResult:
        async with semaphore:
            return await asyncio.to_thread(
                _run_fold, cleaned, reduced, plan, fold,
                model_config, loss_config, optim_config, cv, ablation, recorder, baseline_config,
            )

    folds = await asyncio.gather(*(run(i) for i in range(cv.k)))
    return _finish_cv(list(folds), plan, dropped, ablation)


def run_cv(
    table: RawTable,
    schema: DatasetSchema,
    model_config: SafnConfig,
    loss_config: LossConfig,
    optim_config: OptimConfig,
    cv: CvConfig | None = None,
    ablation: AblationSpec | None = None,
    *,
    recorder: TrainingRecorder | None = None,
    baseline_config: MlpBaselineConfig | None = None,
) -> CvResult:
    """k-fold cross-validation with fold-local preprocessing; aggregates use the sample SD."""
    cv = cv or CvConfig()
    if cv.resolved_jobs > 1:
        return asyncio.run(
            run_cv_async(
                table, schema, model_config, loss_config, optim_config, cv, ablation,
                recorder=recorder, baseline_config=baseline_config,
            )
        )
    cleaned, reduced, dropped = prepare_table(table, schema, cv.missingness_threshold)
    plan = make_folds(cleaned.labels, cleaned.subject_ids, cv.k, cv.seed, grouped=cv.grouped)
    folds = [
        _run_fold(cleaned, reduced, plan, i, model_config, loss_config, optim_config, cv, ablation, recorder, baseline_config)
        for i in range(cv.k)
    ]
    return _finish_cv(folds, plan, dropped, ablation)


def fold_tables(
    table: RawTable,
    schema: DatasetSchema,
    cv: CvConfig,
    fold: int,
) -> tuple[RawTable, RawTable, DatasetSchema]:
    """(train, validation, reduced schema) for one fold of the plan ``run_cv`` would build."""
    if not 0 <= fold < cv.k:
        raise UsageError(f"fold must lie in [0, {cv.k - 1}], got {fold}")
    cleaned, reduced, _ = prepare_table(table, schema, cv.missingness_threshold)
    plan = make_folds(cleaned.labels, cleaned.subject_ids, cv.k, cv.seed, grouped=cv.grouped)
    train_idx, val_idx = plan.split(fold)
    return cleaned.subset(train_idx), cleaned.subset(val_idx), reduced


def run_single_fold(
    table: RawTable,
    schema: DatasetSchema,
    model_config: SafnConfig,
    loss_config: LossConfig,
    optim_config: OptimConfig,
    cv: CvConfig | None = None,
    fold: int = 0,
    ablation: AblationSpec | None = None,
    *,
    recorder: TrainingRecorder | None = None,
    baseline_config: MlpBaselineConfig | None = None,
) -> FoldResult:
    """Exactly the ``fold``-th fold of :func:`run_cv`, seeds included."""
    cv = cv or CvConfig()
    if not 0 <= fold < cv.k:
        raise UsageError(f"fold must lie in [0, {cv.k - 1}], got {fold}")
    cleaned, reduced, _ = prepare_table(table, schema, cv.missingness_threshold)
    plan = make_folds(cleaned.labels, cleaned.subject_ids, cv.k, cv.seed, grouped=cv.grouped)
    return _run_fold(
        cleaned, reduced, plan, fold, model_config, loss_config, optim_config, cv, ablation, recorder, baseline_config
    )


def _finish_cv(
    folds: list[FoldResult],
    plan: FoldPlan,
    dropped: list[str],
    ablation: AblationSpec | None,
) -> CvResult:
    aggregate = aggregate_reports([f.report for f in folds])
    logger.info(
        "CV done: roc_auc=%.4f±%.4f balanced_accuracy=%.4f±%.4f",
        aggregate.mean["roc_auc"], aggregate.sd["roc_auc"],
        aggregate.mean["balanced_accuracy"], aggregate.sd["balanced_accuracy"],
    )
    return CvResult(folds=folds, aggregate=aggregate, plan=plan, dropped_columns=dropped, ablation=ablation)
