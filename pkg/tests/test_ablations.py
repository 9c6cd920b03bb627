import math
import unittest

import numpy as np
import pandas as pd
import pytest

from safn import training
from safn.ablations import (
    FULL_MODEL,
    LOGREG_BASELINE,
    AblationOutcome,
    AblationRegistry,
    ablation_frame,
    registry,
    run_ablation_grid,
    write_ablation_csv,
)
from safn.core import FUSION_ORDER, DataError, Modality, Result, UsageError
from safn.interpret import gate_contributions
from safn.model import SafnConfig
from safn.objective import LossConfig
from safn.optim import OptimConfig
from safn.synthetic import ModalitySignal, SyntheticConfig, generate_synthetic
from safn.testing import fast_optim_config, tiny_synthetic_config
from safn.training import AblationSpec, CvConfig
from tests.utils import tiny_config


class TestRegistry(unittest.TestCase):
    def test_default_grid(self):
        self.assertEqual(len(registry), 9)
        names = list(dict(registry.items()))
        self.assertEqual(names[0], "SAFN (full)")
        self.assertIn("SAFN w/o cross-attention", registry)
        self.assertNotIn(LOGREG_BASELINE.name, registry)

    def test_variants_drop_what_they_name(self):
        self.assertEqual(registry.require("SAFN w/o clinical").modality_mask, frozenset(FUSION_ORDER) - {Modality.CLINICAL})
        self.assertEqual(registry.require("MRI Cortical Thickness-only SAFN").modality_mask, {Modality.MRI_CT})
        self.assertTrue(registry.require("SAFN w/o gates").disable_gates)
        self.assertEqual(registry.require("Plain MLP (concat all features)").model, "mlp")
        self.assertTrue(registry.require("SAFN (full)").is_full_model)

    def test_select_and_unknown_names(self):
        picked = registry.select(["SAFN w/o gates", "Clinical-only SAFN"])
        self.assertEqual([s.name for s in picked], ["SAFN w/o gates", "Clinical-only SAFN"])
        self.assertEqual(len(registry.select(None)), len(registry))
        with self.assertRaises(UsageError):
            registry.select(["SAFN w/o everything"])

    def test_copy_is_independent(self):
        clone = registry.copy()
        clone.register(AblationSpec("extra", modality_mask=frozenset({Modality.MRI_VOL})))
        self.assertIn("extra", clone)
        self.assertNotIn("extra", registry)
        self.assertIsNone(AblationRegistry().get("SAFN (full)"))


def test_grid_prepends_full_model_and_records_failures(monkeypatch):
    dataset = generate_synthetic(tiny_synthetic_config(seed=2))
    specs = [registry.require("SAFN w/o gates"), LOGREG_BASELINE, AblationSpec("broken", model="logreg")]

    original = training.run_cv

    def flaky(table, schema, model, loss, optim, cv, spec, **kwargs):
        if spec.name == "broken":
            raise DataError("no usable columns")
        return original(table, schema, model, loss, optim, cv, spec, **kwargs)

    monkeypatch.setattr(training, "run_cv", flaky)
    outcomes = run_ablation_grid(
        dataset.table, dataset.schema, specs, tiny_config(), LossConfig(),
        fast_optim_config(epochs=1, patience=1), CvConfig(k=3, seed=1),
    )
    assert [o.spec.name for o in outcomes] == ["SAFN (full)", "SAFN w/o gates", LOGREG_BASELINE.name, "broken"]
    assert [o.result.ok for o in outcomes] == [True, True, True, False]

    # every row shares one fold plan
    plans = [o.result.value.plan.assignments for o in outcomes[:3]]
    assert plans[0] == plans[1] == plans[2]

    frame = ablation_frame(outcomes)
    assert list(frame["status"]) == ["ok", "ok", "ok", "failed"]
    assert frame.loc[3, "error"] == "no usable columns"
    assert math.isnan(frame.loc[3, "roc_auc"])
    assert "roc_auc_sd" in frame.columns


def test_grid_does_not_duplicate_full_model():
    dataset = generate_synthetic(tiny_synthetic_config(seed=2))
    outcomes = run_ablation_grid(
        dataset.table, dataset.schema, [FULL_MODEL], tiny_config(), LossConfig(),
        fast_optim_config(epochs=1, patience=1), CvConfig(k=3), include_full=True,
    )
    assert len(outcomes) == 1


def test_ablation_csv(tmp_path):
    outcomes = [AblationOutcome(LOGREG_BASELINE, Result.Error(DataError("boom")))]
    frame = pd.read_csv(write_ablation_csv(tmp_path / "ablation.csv", outcomes))
    assert frame.loc[0, "model"] == LOGREG_BASELINE.name
    assert frame.loc[0, "status"] == "failed"
    assert frame.columns[-2:].tolist() == ["status", "error"]


@pytest.mark.parametrize("name", [name for name, _ in registry.items()])
def test_every_registered_variant_is_valid(name):
    spec = registry.require(name)
    assert spec.modality_mask
    assert spec.model in ("safn", "mlp")


BENCHMARK_MODEL = SafnConfig(d_model=16, n_heads=2, n_layers=1, dropout=0.1, ffn_multiplier=2, head_hidden=32)


def _benchmark_optim(seed: int, **overrides) -> OptimConfig:
    values = dict(lr=2e-3, epochs=30, patience=10, batch_size=64, micro_batch=16, ema_decay=0.95, seed=seed)
    values.update(overrides)
    return OptimConfig(**values)


def _composite(outcome: AblationOutcome) -> float:
    mean = outcome.result.unwrap().aggregate.mean
    return (mean["roc_auc"] + mean["balanced_accuracy"] + mean["f1"]) / 3.0


@pytest.mark.slow
def test_full_size_cohort_benchmark():
    dataset = generate_synthetic(SyntheticConfig(seed=11))
    specs = registry.select(["Clinical-only SAFN", "MRI Cortical Thickness-only SAFN"])
    full, clinical, thickness = run_ablation_grid(
        dataset.table, dataset.schema, specs, BENCHMARK_MODEL, LossConfig(), _benchmark_optim(11), CvConfig(k=5, seed=11),
    )

    aggregate = full.result.unwrap().aggregate
    assert aggregate.mean["roc_auc"] >= 0.95
    assert aggregate.mean["balanced_accuracy"] >= 0.90
    assert _composite(clinical) > _composite(thickness)

    gates = gate_contributions(np.array([[aggregate.gate_means[m] for m in FUSION_ORDER]]))
    assert FUSION_ORDER[int(np.argmax(gates.shares))] is Modality.CLINICAL


@pytest.mark.slow
def test_class_balanced_focal_holds_up_under_imbalance():
    weak = SyntheticConfig(
        n_pd=270,
        n_hc=30,
        widths={Modality.MRI_CT: 10, Modality.CLINICAL: 20, Modality.MRI_VOL: 5, Modality.DEMOGRAPHIC: 3},
        signals={
            Modality.MRI_CT: ModalitySignal(0.3, 0.2),
            Modality.CLINICAL: ModalitySignal(0.8, 0.25),
            Modality.MRI_VOL: ModalitySignal(0.2, 0.2),
            Modality.DEMOGRAPHIC: ModalitySignal(0.0, 0.0),
        },
        n_categorical_demographic=1,
    )
    no_weighting = registry.require("SAFN (no class-weighting)")
    weighted, unweighted = [], []
    for seed in range(5):
        dataset = generate_synthetic(weak, seed=seed)
        full, ablated = run_ablation_grid(
            dataset.table, dataset.schema, [no_weighting], BENCHMARK_MODEL, LossConfig(),
            _benchmark_optim(seed, batch_size=32), CvConfig(k=5, seed=seed),
        )
        weighted.append(full.result.unwrap().aggregate.mean["balanced_accuracy"])
        unweighted.append(ablated.result.unwrap().aggregate.mean["balanced_accuracy"])
    assert np.mean(weighted) >= np.mean(unweighted) - 0.01
