"""Synthetic stand-in for the access-restricted cohort.

Only the schema, the class imbalance and a controllable separability are
imitated: every numeric column is an independent Gaussian, and PD rows get a
standardised mean shift on a designated subset of columns.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
import pandas as pd

from safn.core import DEFAULT_BLOCK_WIDTHS, FUSION_ORDER, DataError, Modality
from safn.data import DatasetSchema, RawTable

logger = logging.getLogger(__name__)

COLUMN_PREFIX: dict[Modality, str] = {
    Modality.MRI_CT: "CT",
    Modality.MRI_VOL: "VOL",
    Modality.CLINICAL: "CLIN",
    Modality.DEMOGRAPHIC: "DEMO",
}
LABEL_COLUMN = "COHORT"
SUBJECT_COLUMN = "PATNO"


@dataclass(frozen=True)
class ModalitySignal:
    effect_size: float = 0.0
    informative_fraction: float = 0.0


def _default_signals() -> dict[Modality, ModalitySignal]:
    return {
        Modality.MRI_CT: ModalitySignal(0.3, 0.1),
        Modality.MRI_VOL: ModalitySignal(0.3, 0.2),
        Modality.CLINICAL: ModalitySignal(1.5, 0.1),
        Modality.DEMOGRAPHIC: ModalitySignal(0.2, 0.2),
    }


@dataclass(frozen=True)
class SyntheticConfig:
    n_pd: int = 570
    n_hc: int = 133
    widths: Mapping[Modality, int] = field(default_factory=lambda: dict(DEFAULT_BLOCK_WIDTHS))
    signals: Mapping[Modality, ModalitySignal] = field(default_factory=_default_signals)
    n_categorical_demographic: int = 2
    missing_rate: float = 0.05
    repeat_visit_rate: float = 0.0
    visit_noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_pd <= 0 or self.n_hc <= 0:
            raise DataError(f"n_pd and n_hc must be positive, got {self.n_pd}/{self.n_hc}")
        for modality, signal in self.signals.items():
            if not 0.0 <= signal.informative_fraction <= 1.0:
                raise DataError(
                    f"Informative fraction for {Modality(modality).value} must lie in [0, 1], "
                    f"got {signal.informative_fraction}"
                )
        for modality in FUSION_ORDER:
            if self.widths.get(modality, 0) < 1:
                raise DataError(f"Block width for {modality.value} must be at least 1")
        if not 0 <= self.n_categorical_demographic <= self.widths[Modality.DEMOGRAPHIC]:
            raise DataError("n_categorical_demographic exceeds the demographic block width")
        if not 0.0 <= self.missing_rate < 1.0:
            raise DataError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if not 0.0 <= self.repeat_visit_rate <= 1.0:
            raise DataError(f"repeat_visit_rate must lie in [0, 1], got {self.repeat_visit_rate}")


class SyntheticDataset(NamedTuple):
    table: RawTable
    schema: DatasetSchema
    informative: dict[Modality, list[str]]


def _column_names(modality: Modality, width: int) -> list[str]:
    digits = max(2, len(str(width - 1)))
    return [f"{COLUMN_PREFIX[modality]}_{i:0{digits}d}" for i in range(width)]


def generate_synthetic(config: SyntheticConfig, seed: int | None = None) -> SyntheticDataset:
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)

    n_subjects = config.n_pd + config.n_hc
    labels = np.concatenate([np.ones(config.n_pd, dtype=np.int64), np.zeros(config.n_hc, dtype=np.int64)])
    labels = labels[rng.permutation(n_subjects)]

    assignment: dict[str, Modality] = {}
    categorical: list[str] = []
    numeric_columns: list[str] = []
    informative: dict[Modality, list[str]] = {}
    shift: dict[str, float] = {}

    for modality in FUSION_ORDER:
        names = _column_names(modality, int(config.widths[modality]))
        for name in names:
            assignment[name] = modality
        if modality is Modality.DEMOGRAPHIC:
            categorical = names[: config.n_categorical_demographic]
        numeric = [c for c in names if c not in categorical]
        numeric_columns.extend(numeric)

        signal = config.signals.get(modality, ModalitySignal())
        n_inf = math.ceil(signal.informative_fraction * len(numeric)) if signal.informative_fraction > 0 else 0
        chosen = sorted(rng.choice(len(numeric), size=min(n_inf, len(numeric)), replace=False).tolist())
        informative[modality] = [numeric[i] for i in chosen]
        for col in informative[modality]:
            shift[col] = signal.effect_size

    n_num = len(numeric_columns)
    loc = rng.uniform(-5.0, 5.0, size=n_num)
    scale = rng.uniform(0.5, 3.0, size=n_num)
    effect = np.array([shift.get(c, 0.0) for c in numeric_columns])

    base = rng.standard_normal((n_subjects, n_num)) + labels[:, None] * effect[None, :]
    cat_values = [
        rng.integers(0, 2 + (j % 2), size=n_subjects) for j in range(len(categorical))
    ]

    # Row layout: each subject's first visit, optionally followed by a repeat visit.
    repeats = rng.random(n_subjects) < config.repeat_visit_rate
    row_subject = np.repeat(np.arange(n_subjects), 1 + repeats.astype(np.int64))
    first_visit = np.concatenate([[True], row_subject[1:] != row_subject[:-1]])
    noise = rng.standard_normal((row_subject.size, n_num)) * config.visit_noise
    z = base[row_subject] + np.where(first_visit[:, None], 0.0, noise)
    values = loc[None, :] + scale[None, :] * z

    missing = rng.random(values.shape) < config.missing_rate
    for j in np.flatnonzero(missing.all(axis=0)):
        missing[0, j] = False
    values = np.where(missing, np.nan, values)

    columns: dict[str, object] = {
        SUBJECT_COLUMN: [f"S{i:05d}" for i in row_subject],
        LABEL_COLUMN: labels[row_subject],
    }
    numeric_index = {c: j for j, c in enumerate(numeric_columns)}
    levels = ("A", "B", "C")
    cat_missing = rng.random((row_subject.size, len(categorical))) < config.missing_rate
    for name in assignment:
        if name in numeric_index:
            columns[name] = values[:, numeric_index[name]]
        else:
            j = categorical.index(name)
            drawn = cat_values[j][row_subject]
            columns[name] = [None if cat_missing[r, j] else levels[v] for r, v in enumerate(drawn)]

    frame = pd.DataFrame(columns)
    schema = DatasetSchema(
        modality_assignment=assignment,
        label_column=LABEL_COLUMN,
        subject_id_column=SUBJECT_COLUMN,
        categorical_columns=frozenset(categorical),
    )
    logger.info(
        "Generated %d rows (%d PD / %d HC subjects, %d repeat visits)",
        len(frame), config.n_pd, config.n_hc, int(repeats.sum()),
    )
    return SyntheticDataset(
        table=RawTable(frame=frame, label_column=LABEL_COLUMN, subject_id_column=SUBJECT_COLUMN),
        schema=schema,
        informative=informative,
    )
