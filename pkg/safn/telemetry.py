from __future__ import annotations

import functools
import logging
from typing import Any, cast

from safn import training

logger = logging.getLogger(__name__)

_HAS_OTEL = False

try:
    from opentelemetry import trace as _trace  # type: ignore[import-not-found]
    from opentelemetry.trace import Status as _Status, StatusCode as _StatusCode  # type: ignore[import-not-found]
    _HAS_OTEL = True
except ImportError:
    _trace = None
    _Status = None
    _StatusCode = None


def instrument(tracer_provider: Any = None) -> bool:
    """Wraps fold training and cross-validation in OpenTelemetry spans.

    Returns True if instrumentation was installed, False otherwise.
    """
    if not _HAS_OTEL or _trace is None:
        logger.warning("OpenTelemetry not installed; skipping SAFN instrumentation.")
        return False

    tracer = _trace.get_tracer("safn", tracer_provider=tracer_provider)
    _instrument_training(tracer)
    return True


def _instrument_training(tracer: Any) -> None:
    if getattr(training.train_one_fold, "_is_otel_instrumented", False):
        return

    status_cls = cast(Any, _Status)
    status_code_cls = cast(Any, _StatusCode)

    original_fold = training.train_one_fold
    original_cv = training.run_cv

    @functools.wraps(original_fold)
    def fold_wrapper(*args: Any, **kwargs: Any) -> training.FoldResult:
        fold = kwargs.get("fold")
        with tracer.start_as_current_span(f"safn.fold {fold}") as span:
            span.set_attribute("safn.fold", -1 if fold is None else int(fold))
            try:
                result = original_fold(*args, **kwargs)
                span.set_attribute("safn.best_epoch", result.best_epoch)
                span.set_attribute("safn.roc_auc", float(result.report.roc_auc))
                span.set_status(status_cls(status_code_cls.OK))
                return result
            except Exception as e:
                span.record_exception(e)
                span.set_status(status_cls(status_code_cls.ERROR, str(e)))
                raise

    @functools.wraps(original_cv)
    def cv_wrapper(*args: Any, **kwargs: Any) -> training.CvResult:
        ablation = kwargs.get("ablation")
        name = "SAFN (full)" if ablation is None else ablation.name
        with tracer.start_as_current_span(f"safn.cv {name}") as span:
            span.set_attribute("safn.ablation", name)
            try:
                result = original_cv(*args, **kwargs)
                span.set_attribute("safn.folds", len(result.folds))
                span.set_attribute("safn.mean_roc_auc", float(result.aggregate.mean["roc_auc"]))
                return result
            except Exception as e:
                span.record_exception(e)
                span.set_status(status_cls(status_code_cls.ERROR, str(e)))
                raise

    setattr(fold_wrapper, "_is_otel_instrumented", True)
    setattr(cv_wrapper, "_is_otel_instrumented", True)
    training.train_one_fold = fold_wrapper  # type: ignore[assignment]
    training.run_cv = cv_wrapper  # type: ignore[assignment]
