from __future__ import annotations

import contextlib
import logging
from contextvars import ContextVar
from typing import Iterator

current_run_id: ContextVar[str | None] = ContextVar("safn_run_id", default=None)
current_fold: ContextVar[int | None] = ContextVar("safn_fold", default=None)
current_ablation: ContextVar[str | None] = ContextVar("safn_ablation", default=None)


class SafnLogFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        record.safn_run_id = current_run_id.get() or "-"
        fold = current_fold.get()
        record.safn_fold = "-" if fold is None else str(fold)
        record.safn_ablation = current_ablation.get() or "-"
        return True


def install_structured_logging(target: logging.Logger | logging.Handler | None = None) -> None:
    """
    Adds a logging.Filter that injects SAFN run context (run id, fold index,
    ablation name) into every record passing through *target*. Reference the
    fields from a formatter via %(safn_run_id)s, %(safn_fold)s and
    %(safn_ablation)s.
    """
    obj = target if target is not None else logging.getLogger("safn")
    for existing in getattr(obj, "filters", []):
        if isinstance(existing, SafnLogFilter):
            return
    obj.addFilter(SafnLogFilter())


@contextlib.contextmanager
def log_context(
    *,
    run_id: str | None = None,
    fold: int | None = None,
    ablation: str | None = None,
) -> Iterator[None]:
    """Temporarily set the structured-logging context vars that are not None."""
    tokens = []
    if run_id is not None:
        tokens.append((current_run_id, current_run_id.set(run_id)))
    if fold is not None:
        tokens.append((current_fold, current_fold.set(fold)))
    if ablation is not None:
        tokens.append((current_ablation, current_ablation.set(ablation)))
    try:
        yield
    finally:
        for var, token in reversed(tokens):
            var.reset(token)
