"""Pytest fixtures and helpers for testing SAFN pipelines.

Usage in your ``conftest.py``::

    pytest_plugins = ["safn.testing"]

or import fixtures directly::

    from safn.testing import tiny_model_config, tiny_dataset
"""
from __future__ import annotations

import pytest

from safn.core import Modality
from safn.model import SafnConfig
from safn.optim import OptimConfig
from safn.synthetic import ModalitySignal, SyntheticConfig, SyntheticDataset, generate_synthetic

TINY_WIDTHS = {
    Modality.MRI_CT: 3,
    Modality.CLINICAL: 4,
    Modality.MRI_VOL: 2,
    Modality.DEMOGRAPHIC: 2,
}


def tiny_synthetic_config(seed: int = 0, **overrides) -> SyntheticConfig:
    """A few dozen subjects over 3/4/2/2-wide blocks with a strong clinical signal."""
    values = dict(
        n_pd=36,
        n_hc=24,
        widths=dict(TINY_WIDTHS),
        signals={
            Modality.MRI_CT: ModalitySignal(0.5, 0.34),
            Modality.CLINICAL: ModalitySignal(3.0, 0.5),
            Modality.MRI_VOL: ModalitySignal(0.0, 0.0),
            Modality.DEMOGRAPHIC: ModalitySignal(0.0, 0.0),
        },
        n_categorical_demographic=1,
        missing_rate=0.05,
        seed=seed,
    )
    values.update(overrides)
    return SyntheticConfig(**values)


def fast_optim_config(**overrides) -> OptimConfig:
    values = dict(epochs=3, patience=3, batch_size=16, micro_batch=8, lr=3e-3, seed=0)
    values.update(overrides)
    return OptimConfig(**values)


@pytest.fixture
def tiny_model_config() -> SafnConfig:
    """D=8, 2 heads, 1 layer, no dropout."""
    return SafnConfig(d_model=8, n_heads=2, n_layers=1, dropout=0.0, ffn_multiplier=2, head_hidden=8)


@pytest.fixture
def tiny_dataset() -> SyntheticDataset:
    return generate_synthetic(tiny_synthetic_config())


@pytest.fixture
def fast_optim() -> OptimConfig:
    return fast_optim_config()


@pytest.fixture
def safn_output_dir(tmp_path, monkeypatch):
    """A fresh output directory, also exported as SAFN_OUTPUT_DIR."""
    out = tmp_path / "safn-output"
    monkeypatch.setenv("SAFN_OUTPUT_DIR", str(out))
    return out
