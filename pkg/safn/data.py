"""Loading, validation and leakage-safe preprocessing of multimodal tabular data.

A dataset is a CSV with one row per visit plus a JSON manifest
(:class:`DatasetSchema`) assigning every feature column to one of the four
modalities. Preprocessing statistics are always fitted on a training
partition and then frozen; applying them to any other partition never looks
at that partition's values.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np
import pandas as pd

from safn.core import FUSION_ORDER, DataError, Modality, parse_modality

logger = logging.getLogger(__name__)

MISSING_LEVEL = "nan"
MANIFEST_NAME = "manifest.json"
DATA_NAME = "data.csv"


@dataclass(frozen=True)
class DatasetSchema:
    modality_assignment: Mapping[str, Modality]
    label_column: str
    subject_id_column: str
    categorical_columns: frozenset[str] = frozenset()
    positive_label: str = "PD"
    negative_label: str = "HC"

    def __post_init__(self) -> None:
        assignment = {str(col): parse_modality(mod) for col, mod in self.modality_assignment.items()}
        object.__setattr__(self, "modality_assignment", assignment)
        object.__setattr__(self, "categorical_columns", frozenset(self.categorical_columns))
        for reserved in (self.label_column, self.subject_id_column):
            if reserved in assignment:
                raise DataError(f"Column '{reserved}' cannot be both a feature and the label/subject column", column=reserved)
        if self.label_column == self.subject_id_column:
            raise DataError("label_column and subject_id_column must differ")
        unknown = self.categorical_columns - assignment.keys()
        if unknown:
            raise DataError(f"Categorical columns not assigned to a modality: {', '.join(sorted(unknown))}")
        if self.positive_label == self.negative_label:
            raise DataError("positive_label and negative_label must differ")

    @property
    def feature_columns(self) -> list[str]:
        return list(self.modality_assignment)

    @property
    def required_columns(self) -> list[str]:
        return [self.subject_id_column, self.label_column, *self.modality_assignment]

    def columns_for(self, modality: Modality) -> list[str]:
        return [col for col, mod in self.modality_assignment.items() if mod is modality]

    def is_categorical(self, column: str) -> bool:
        return column in self.categorical_columns

    def block_widths(self) -> dict[Modality, int]:
        return {m: len(self.columns_for(m)) for m in FUSION_ORDER}

    def without(self, columns: Iterable[str]) -> DatasetSchema:
        drop = set(columns)
        return DatasetSchema(
            modality_assignment={c: m for c, m in self.modality_assignment.items() if c not in drop},
            label_column=self.label_column,
            subject_id_column=self.subject_id_column,
            categorical_columns=frozenset(self.categorical_columns - drop),
            positive_label=self.positive_label,
            negative_label=self.negative_label,
        )

    def to_manifest(self) -> dict[str, Any]:
        return {
            "label_column": self.label_column,
            "subject_id_column": self.subject_id_column,
            "positive_label": self.positive_label,
            "negative_label": self.negative_label,
            "categorical_columns": sorted(self.categorical_columns),
            "modalities": {col: mod.value for col, mod in self.modality_assignment.items()},
        }

    @classmethod
    def from_manifest(cls, data: Mapping[str, Any]) -> DatasetSchema:
        try:
            return cls(
                modality_assignment=dict(data["modalities"]),
                label_column=data["label_column"],
                subject_id_column=data["subject_id_column"],
                categorical_columns=frozenset(data.get("categorical_columns", [])),
                positive_label=str(data.get("positive_label", "PD")),
                negative_label=str(data.get("negative_label", "HC")),
            )
        except KeyError as e:
            raise DataError(f"Manifest is missing required key {e.args[0]!r}") from None

    def map_label(self, raw: str) -> int:
        token = raw.strip()
        if token in (self.positive_label, "1"):
            return 1
        if token in (self.negative_label, "0"):
            return 0
        raise DataError(
            f"Unmappable label value {raw!r} (expected {self.positive_label!r}/{self.negative_label!r} or 1/0)",
            column=self.label_column,
        )


@dataclass(frozen=True)
class RawTable:
    """Parsed rows before preprocessing.

    Numeric feature columns are float64 with NaN for missing cells; categorical
    columns hold strings or None. The label column holds 0/1 integers. Subject
    IDs may repeat (longitudinal visits).
    """

    frame: pd.DataFrame
    label_column: str
    subject_id_column: str

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def labels(self) -> np.ndarray:
        return self.frame[self.label_column].to_numpy(dtype=np.int64)

    @property
    def subject_ids(self) -> list[str]:
        return [str(s) for s in self.frame[self.subject_id_column]]

    @property
    def feature_columns(self) -> list[str]:
        return [c for c in self.frame.columns if c not in (self.label_column, self.subject_id_column)]

    def missing_mask(self, column: str) -> np.ndarray:
        return self.frame[column].isna().to_numpy()

    def subset(self, indices: Sequence[int] | np.ndarray) -> RawTable:
        frame = self.frame.iloc[np.asarray(indices, dtype=np.int64)].reset_index(drop=True)
        return RawTable(frame=frame, label_column=self.label_column, subject_id_column=self.subject_id_column)

    def drop_columns(self, columns: Iterable[str]) -> RawTable:
        frame = self.frame.drop(columns=list(columns))
        return RawTable(frame=frame, label_column=self.label_column, subject_id_column=self.subject_id_column)


@dataclass(frozen=True)
class ModalityBundle:
    x_mri_ct: np.ndarray
    x_mri_vol: np.ndarray
    x_clin: np.ndarray
    x_demo: np.ndarray
    label: int
    subject_id: str

    def block(self, modality: Modality) -> np.ndarray:
        return {
            Modality.MRI_CT: self.x_mri_ct,
            Modality.MRI_VOL: self.x_mri_vol,
            Modality.CLINICAL: self.x_clin,
            Modality.DEMOGRAPHIC: self.x_demo,
        }[modality]


@dataclass(frozen=True)
class ModalityBatch:
    """Stacked feature blocks for N subjects, one (N, F_m) array per modality."""

    blocks: Mapping[Modality, np.ndarray]
    labels: np.ndarray
    subject_ids: tuple[str, ...]
    feature_names: Mapping[Modality, tuple[str, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: Sequence[int] | np.ndarray) -> ModalityBatch:
        idx = np.asarray(indices, dtype=np.int64)
        return ModalityBatch(
            blocks={m: x[idx] for m, x in self.blocks.items()},
            labels=self.labels[idx],
            subject_ids=tuple(self.subject_ids[i] for i in idx),
            feature_names=self.feature_names,
        )

    def concatenated(self, modalities: Sequence[Modality] = FUSION_ORDER) -> np.ndarray:
        return np.concatenate([self.blocks[m] for m in modalities], axis=1)

    def all_feature_names(self, modalities: Sequence[Modality] = FUSION_ORDER) -> list[tuple[Modality, str]]:
        return [(m, name) for m in modalities for name in self.feature_names.get(m, ())]

    @classmethod
    def from_bundles(
        cls,
        bundles: Sequence[ModalityBundle],
        feature_names: Mapping[Modality, tuple[str, ...]] | None = None,
    ) -> ModalityBatch:
        if not bundles:
            raise DataError("Cannot build a batch from zero bundles")
        return cls(
            blocks={m: np.stack([b.block(m) for b in bundles]).astype(np.float64) for m in FUSION_ORDER},
            labels=np.array([b.label for b in bundles], dtype=np.int64),
            subject_ids=tuple(b.subject_id for b in bundles),
            feature_names=dict(feature_names or {}),
        )

    def bundles(self) -> list[ModalityBundle]:
        return [
            ModalityBundle(
                x_mri_ct=self.blocks[Modality.MRI_CT][i],
                x_mri_vol=self.blocks[Modality.MRI_VOL][i],
                x_clin=self.blocks[Modality.CLINICAL][i],
                x_demo=self.blocks[Modality.DEMOGRAPHIC][i],
                label=int(self.labels[i]),
                subject_id=self.subject_ids[i],
            )
            for i in range(len(self))
        ]


# ============================================================================
# LOADING
# ============================================================================

def load_manifest(path: str | Path) -> DatasetSchema:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"Manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"Manifest {path} is not valid JSON: {e}") from None
    return DatasetSchema.from_manifest(data)


def load_csv(path: str | Path, schema: DatasetSchema) -> RawTable:
    """Parse a CSV into a RawTable; empty cells become missing values."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Dataset not found: {path}")

    header = pd.read_csv(path, header=None, nrows=1, dtype=str, keep_default_na=False).iloc[0].tolist()
    seen: set[str] = set()
    for name in header:
        if name in seen:
            raise DataError(f"Duplicate header column '{name}' in {path}", column=name)
        seen.add(name)
    for required in schema.required_columns:
        if required not in seen:
            raise DataError(f"Dataset {path} is missing column '{required}'", column=required)

    raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    extra = [c for c in raw.columns if c not in schema.required_columns]
    if extra:
        logger.debug("Ignoring %d columns not in the schema: %s", len(extra), ", ".join(extra[:10]))

    columns: dict[str, Any] = {
        schema.subject_id_column: raw[schema.subject_id_column].str.strip(),
        schema.label_column: raw[schema.label_column].map(schema.map_label).astype(np.int64),
    }
    for col in schema.feature_columns:
        text = raw[col].str.strip()
        missing = text == ""
        if schema.is_categorical(col):
            columns[col] = text.where(~missing, None).astype(object)
        else:
            try:
                columns[col] = pd.to_numeric(text.where(~missing, None), errors="raise").astype(np.float64)
            except (ValueError, TypeError) as e:
                raise DataError(f"Column '{col}' holds a non-numeric value: {e}", column=col) from None

    frame = pd.DataFrame(columns)
    logger.info("Loaded %d rows x %d feature columns from %s", len(frame), len(schema.feature_columns), path)
    return RawTable(frame=frame, label_column=schema.label_column, subject_id_column=schema.subject_id_column)


def write_dataset(directory: str | Path, table: RawTable, schema: DatasetSchema) -> tuple[Path, Path]:
    """Write a table and its manifest in the format load_csv/load_manifest read."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame = table.frame.copy()
    frame[schema.label_column] = np.where(
        frame[schema.label_column].to_numpy() == 1, schema.positive_label, schema.negative_label
    )
    csv_path = directory / DATA_NAME
    manifest_path = directory / MANIFEST_NAME
    frame[schema.required_columns].to_csv(csv_path, index=False, na_rep="", lineterminator="\n")
    manifest_path.write_text(json.dumps(schema.to_manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, manifest_path


# ============================================================================
# CLEANING
# ============================================================================

def drop_high_missingness(table: RawTable, threshold: float = 0.20) -> tuple[RawTable, list[str]]:
    """Remove feature columns whose missing fraction strictly exceeds *threshold*."""
    if not 0.0 < threshold < 1.0:
        raise DataError(f"Missingness threshold must lie in (0, 1), got {threshold}")
    fractions = table.frame[table.feature_columns].isna().mean(axis=0)
    dropped = [str(c) for c, frac in fractions.items() if frac > threshold]
    if dropped:
        logger.info("Dropping %d columns above %.0f%% missingness", len(dropped), threshold * 100)
    return table.drop_columns(dropped), dropped


def flag_outliers(table: RawTable, schema: DatasetSchema, z: float = 3.0) -> dict[str, int]:
    """Count cells with |z-score| > z per numeric column. Nothing is removed."""
    flagged: dict[str, int] = {}
    for col in schema.feature_columns:
        if schema.is_categorical(col):
            continue
        values = table.frame[col].to_numpy(dtype=np.float64)
        observed = values[~np.isnan(values)]
        if observed.size < 2:
            continue
        sd = observed.std()
        if sd <= 0:
            continue
        count = int(np.sum(np.abs(observed - observed.mean()) / sd > z))
        if count:
            flagged[col] = count
    if flagged:
        logger.warning(
            "Outlier screening flagged %d cells across %d columns (|z| > %.1f); no rows removed",
            sum(flagged.values()), len(flagged), z,
        )
    return flagged


# ============================================================================
# PREPROCESSING
# ============================================================================

@dataclass(frozen=True)
class FittedPreprocessor:
    medians: Mapping[str, float]
    means: Mapping[str, float]
    stds: Mapping[str, float]
    categories: Mapping[str, Mapping[str, int]]
    modality_columns: Mapping[Modality, tuple[str, ...]]
    categorical_encoding: Literal["onehot", "index"] = "onehot"

    @property
    def columns(self) -> set[str]:
        return set(self.medians) | set(self.categories)

    def column_width(self, column: str) -> int:
        if column in self.categories and self.categorical_encoding == "onehot":
            return len(self.categories[column])
        return 1

    def feature_names(self, modality: Modality) -> tuple[str, ...]:
        names: list[str] = []
        for col in self.modality_columns.get(modality, ()):
            if col in self.categories and self.categorical_encoding == "onehot":
                names.extend(f"{col}={level}" for level in self.categories[col])
            else:
                names.append(col)
        return tuple(names)

    def all_feature_names(self) -> dict[Modality, tuple[str, ...]]:
        return {m: self.feature_names(m) for m in FUSION_ORDER}

    def block_widths(self) -> dict[Modality, int]:
        return {m: len(self.feature_names(m)) for m in FUSION_ORDER}


def _category_token(value: Any) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return MISSING_LEVEL
    return str(value)


def fit_preprocessor(
    table: RawTable,
    schema: DatasetSchema,
    categorical_encoding: Literal["onehot", "index"] = "onehot",
) -> FittedPreprocessor:
    """Fit imputation, scaling and category maps on a training partition."""
    if len(table) == 0:
        raise DataError("Cannot fit a preprocessor on an empty table")

    medians: dict[str, float] = {}
    means: dict[str, float] = {}
    stds: dict[str, float] = {}
    categories: dict[str, dict[str, int]] = {}

    for col in schema.feature_columns:
        if col not in table.frame.columns:
            raise DataError(f"Column '{col}' is in the schema but not in the table", column=col)
        series = table.frame[col]
        if schema.is_categorical(col):
            mapping: dict[str, int] = {}
            for value in series:
                token = _category_token(value)
                if token not in mapping:
                    mapping[token] = len(mapping)
            categories[col] = mapping
            continue

        values = series.to_numpy(dtype=np.float64)
        observed = values[~np.isnan(values)]
        if observed.size == 0:
            raise DataError(f"Column '{col}' has no observed values in the training partition", column=col)
        median = float(np.median(observed))
        imputed = np.where(np.isnan(values), median, values)
        mean = float(imputed.mean())
        sd = float(imputed.std())  # population SD
        if sd <= 1e-12 * max(1.0, abs(mean)):
            sd = 1.0
        medians[col], means[col], stds[col] = median, mean, sd

    return FittedPreprocessor(
        medians=medians,
        means=means,
        stds=stds,
        categories=categories,
        modality_columns={m: tuple(schema.columns_for(m)) for m in FUSION_ORDER},
        categorical_encoding=categorical_encoding,
    )


def transform_blocks(table: RawTable, prep: FittedPreprocessor, schema: DatasetSchema) -> dict[Modality, np.ndarray]:
    """Apply frozen statistics and return one (N, F_m) float64 array per modality."""
    known = prep.columns
    for col in table.feature_columns:
        if col in schema.modality_assignment and col not in known:
            raise DataError(f"Column '{col}' is present in the table but was not fitted", column=col)

    n = len(table)
    blocks: dict[Modality, np.ndarray] = {}
    for modality in FUSION_ORDER:
        parts: list[np.ndarray] = []
        for col in prep.modality_columns.get(modality, ()):
            if col not in table.frame.columns:
                raise DataError(f"Fitted column '{col}' is missing from the table", column=col)
            if col in prep.categories:
                mapping = prep.categories[col]
                idx = np.array([mapping.get(_category_token(v), -1) for v in table.frame[col]], dtype=np.int64)
                if prep.categorical_encoding == "onehot":
                    onehot = np.zeros((n, len(mapping)), dtype=np.float64)
                    seen = idx >= 0
                    onehot[np.flatnonzero(seen), idx[seen]] = 1.0
                    parts.append(onehot)
                else:
                    parts.append(np.where(idx >= 0, idx, len(mapping)).astype(np.float64)[:, None])
            else:
                values = table.frame[col].to_numpy(dtype=np.float64)
                values = np.where(np.isnan(values), prep.medians[col], values)
                parts.append(((values - prep.means[col]) / prep.stds[col])[:, None])
        blocks[modality] = np.concatenate(parts, axis=1) if parts else np.zeros((n, 0), dtype=np.float64)
    return blocks


def apply_preprocessor(table: RawTable, prep: FittedPreprocessor, schema: DatasetSchema) -> list[ModalityBundle]:
    return to_batch(table, prep, schema).bundles()


def to_batch(table: RawTable, prep: FittedPreprocessor, schema: DatasetSchema) -> ModalityBatch:
    blocks = transform_blocks(table, prep, schema)
    return ModalityBatch(
        blocks=blocks,
        labels=table.labels,
        subject_ids=tuple(table.subject_ids),
        feature_names=prep.all_feature_names(),
    )


def prepare_table(
    table: RawTable,
    schema: DatasetSchema,
    missingness_threshold: float = 0.20,
) -> tuple[RawTable, DatasetSchema, list[str]]:
    """Drop high-missingness columns and return the table with its reduced schema."""
    cleaned, dropped = drop_high_missingness(table, missingness_threshold)
    return cleaned, schema.without(dropped), dropped
