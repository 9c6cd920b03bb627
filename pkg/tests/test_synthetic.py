import math

import pandas as pd
import pytest

from safn.core import DEFAULT_BLOCK_WIDTHS, FUSION_ORDER, DataError, Modality
from safn.synthetic import LABEL_COLUMN, SUBJECT_COLUMN, ModalitySignal, SyntheticConfig, generate_synthetic
from safn.testing import TINY_WIDTHS, tiny_synthetic_config


def test_default_cohort_shape():
    dataset = generate_synthetic(SyntheticConfig(missing_rate=0.0))
    frame = dataset.table.frame
    assert len(frame) == 703
    assert frame.shape[1] == sum(DEFAULT_BLOCK_WIDTHS.values()) + 2
    assert int(dataset.table.labels.sum()) == 570
    assert dataset.schema.block_widths() == DEFAULT_BLOCK_WIDTHS
    assert len(dataset.schema.categorical_columns) == 2


def test_same_seed_reproduces_the_table():
    a = generate_synthetic(tiny_synthetic_config(seed=4)).table.frame
    b = generate_synthetic(tiny_synthetic_config(seed=4)).table.frame
    pd.testing.assert_frame_equal(a, b)
    c = generate_synthetic(tiny_synthetic_config(seed=5)).table.frame
    assert not a.equals(c)


def test_informative_counts_follow_fraction(tiny_dataset):
    informative = tiny_dataset.informative
    # ceil(0.5 * 4) clinical, ceil(0.34 * 3) thickness
    assert len(informative[Modality.CLINICAL]) == 2
    assert len(informative[Modality.MRI_CT]) == math.ceil(0.34 * 3)
    assert informative[Modality.MRI_VOL] == []


def test_informative_columns_separate_the_classes():
    config = tiny_synthetic_config(n_pd=300, n_hc=300, missing_rate=0.0)
    dataset = generate_synthetic(config)
    frame, labels = dataset.table.frame, dataset.table.labels
    for col in dataset.informative[Modality.CLINICAL]:
        values = frame[col].to_numpy()
        spread = values.std()
        gap = values[labels == 1].mean() - values[labels == 0].mean()
        assert gap / spread > 0.8


def test_repeat_visits_share_subject_and_label():
    dataset = generate_synthetic(tiny_synthetic_config(repeat_visit_rate=1.0))
    frame = dataset.table.frame
    assert len(frame) == 2 * 60
    assert frame[SUBJECT_COLUMN].nunique() == 60
    assert (frame.groupby(SUBJECT_COLUMN)[LABEL_COLUMN].nunique() == 1).all()


def test_categorical_levels_and_missingness(tiny_dataset):
    (col,) = tiny_dataset.schema.categorical_columns
    values = set(v for v in tiny_dataset.table.frame[col] if v is not None)
    assert values <= {"A", "B", "C"}
    numeric = [c for c in tiny_dataset.schema.feature_columns if c != col]
    assert tiny_dataset.table.frame[numeric].isna().to_numpy().any()
    assert not tiny_dataset.table.frame[numeric].isna().all().any()


def test_invalid_configs():
    with pytest.raises(DataError):
        generate_synthetic(tiny_synthetic_config(n_hc=0))
    with pytest.raises(DataError):
        generate_synthetic(tiny_synthetic_config(signals={Modality.CLINICAL: ModalitySignal(1.0, 1.5)}))
    with pytest.raises(DataError):
        generate_synthetic(tiny_synthetic_config(n_categorical_demographic=TINY_WIDTHS[Modality.DEMOGRAPHIC] + 1))
    with pytest.raises(DataError):
        generate_synthetic(tiny_synthetic_config(widths={m: 0 for m in FUSION_ORDER}))
