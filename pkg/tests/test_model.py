import unittest

import numpy as np
import pytest

from safn.core import FUSION_ORDER, Modality, ShapeError, UsageError
from safn.gradcheck import check_gradient
from safn.model import (
    ModelWiring,
    SafnConfig,
    attention_pool,
    backward,
    build_layout,
    encoder_forward,
    forward,
    gate_and_fuse,
    head_forward,
    parameter_count,
    predict,
    tokenize,
)
from safn.nn import LN_EPS
from safn.objective import LossConfig, loss_gradients, total_loss
from tests.utils import GRADCHECK_WIDTHS, random_batch, tiny_config, tiny_params

LOSS = LossConfig(lambda_s=0.05)


def _objective(params, batch, loss=LOSS, train_mode=False, seed=None):
    gated = params.layout.wiring.gates

    def value(_x=None) -> float:
        trace = forward(batch, params, train_mode=train_mode, dropout_seed=seed)
        return total_loss(trace.prob, batch.labels, trace.alpha if gated else None, loss).total

    trace = forward(batch, params, train_mode=train_mode, dropout_seed=seed)
    dlogit, dalpha = loss_gradients(trace.prob, batch.labels, trace.alpha if gated else None, loss)
    return value, backward(trace, dlogit, params, dalpha)


class TestGradients(unittest.TestCase):
    def test_parameter_gradients_match_finite_differences(self):
        for seed in range(5):
            params = tiny_params(seed)
            batch = random_batch(4, seed=100 + seed)
            value, grads = _objective(params, batch)
            indices = np.random.default_rng(seed).choice(params.layout.size, size=120, replace=False)
            report = check_gradient(value, params.flat, grads.params.flat, indices)
            self.assertTrue(report.passed(), f"seed {seed}: {report}")

    def test_every_parameter_group_is_checked(self):
        params = tiny_params(7)
        batch = random_batch(3, seed=9)
        value, grads = _objective(params, batch)
        # first entry of each tensor
        indices = [params.layout.offsets[name][0] for name in params.layout.names]
        report = check_gradient(value, params.flat, grads.params.flat, indices)
        self.assertTrue(report.passed(), str(report))

    def test_input_gradients_match_finite_differences(self):
        for seed in range(5):
            params = tiny_params(seed)
            batch = random_batch(3, seed=200 + seed)
            value, grads = _objective(params, batch)
            for m in FUSION_ORDER:
                report = check_gradient(value, batch.blocks[m], grads.inputs[m])
                self.assertTrue(report.passed(), f"seed {seed} {m.value}: {report}")

    def test_gradients_with_fixed_dropout_masks(self):
        params = tiny_params(3, dropout=0.3)
        batch = random_batch(4, seed=5)
        value, grads = _objective(params, batch, train_mode=True, seed=(1, 2))
        indices = np.random.default_rng(0).choice(params.layout.size, size=80, replace=False)
        report = check_gradient(value, params.flat, grads.params.flat, indices)
        self.assertTrue(report.passed(), str(report))

    def test_ablated_wirings_have_exact_gradients(self):
        wirings = [
            ModelWiring(gates=False),
            ModelWiring(cross_attention=False),
            ModelWiring(modalities=(Modality.CLINICAL,)),
            ModelWiring(modalities=(Modality.MRI_VOL, Modality.DEMOGRAPHIC)),
        ]
        for wiring in wirings:
            params = tiny_params(11, wiring=wiring)
            batch = random_batch(3, seed=12)
            value, grads = _objective(params, batch)
            indices = np.random.default_rng(1).choice(params.layout.size, size=min(60, params.layout.size), replace=False)
            report = check_gradient(value, params.flat, grads.params.flat, indices)
            self.assertTrue(report.passed(), f"{wiring}: {report}")

    def test_zero_upstream_gradient_gives_zero_gradients(self):
        params = tiny_params(0)
        trace = forward(random_batch(2), params)
        grads = backward(trace, np.zeros(2), params)
        self.assertFalse(np.any(grads.params.flat))
        for m in FUSION_ORDER:
            self.assertFalse(np.any(grads.inputs[m]))


class TestComponents(unittest.TestCase):
    def test_tokenize(self):
        w = np.zeros((1, 4))
        w[0, 0] = 1.0
        b = np.zeros((1, 4))
        b[0, 1] = 1.0
        np.testing.assert_array_equal(tokenize(np.array([2.0]), w, b), [[2.0, 1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(tokenize(np.array([0.0]), w, b), b)
        with self.assertRaises(ShapeError):
            tokenize(np.array([1.0, 2.0]), w, b)

    def test_attention_pool(self):
        row = np.array([[0.3, -1.0, 2.0]])
        np.testing.assert_allclose(attention_pool(row, np.array([5.0, 1.0, 1.0])), row[0])
        same = np.repeat(row, 4, axis=0)
        np.testing.assert_allclose(attention_pool(same, np.array([-3.0, 2.0, 0.5])), row[0])
        seq = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        np.testing.assert_allclose(attention_pool(seq, np.array([0.0, 0.0, 1.0])), [0.5, 0.5, 0.0])

    def test_gate_and_fuse(self):
        z = [np.full(2, float(j + 1)) for j in range(4)]
        alpha, h = gate_and_fuse(z, np.zeros((4, 8)), np.zeros(4))
        np.testing.assert_allclose(alpha, [0.5] * 4)
        np.testing.assert_allclose(h, np.concatenate(z) / 2)

        alpha, _ = gate_and_fuse(z, np.zeros((4, 8)), np.array([10.0, -10.0, 0.0, 0.0]))
        np.testing.assert_allclose(alpha, [0.9999546, 0.0000454, 0.5, 0.5], atol=1e-7)

    def test_fused_blocks_are_gate_scaled(self):
        rng = np.random.default_rng(0)
        z = [rng.normal(size=(5, 3)) for _ in range(4)]
        alpha, h = gate_and_fuse(z, rng.normal(size=(4, 12)), rng.normal(size=4))
        for j in range(4):
            np.testing.assert_allclose(h[:, 3 * j : 3 * (j + 1)], alpha[:, j : j + 1] * z[j])

    def test_zero_head_predicts_one_half(self):
        params = tiny_params(0)
        head = {k: np.zeros_like(v) for k, v in params.group("head.").items()}
        width = head["ln.g"].shape[0]
        logit = head_forward(np.random.default_rng(1).normal(size=width), head, params.layout.config)
        self.assertEqual(float(logit), 0.0)

    def test_encoder_with_zero_weights_is_layer_norm(self):
        config = tiny_config(d_model=4, n_heads=2)
        layout = build_layout(config, GRADCHECK_WIDTHS)
        layer = {
            name[len("mri_ct.enc.0."):]: np.zeros(shape)
            for name, shape in layout.entries
            if name.startswith("mri_ct.enc.0.")
        }
        layer["ln1.g"][...] = 1.0
        layer["ln2.g"][...] = 1.0
        x = np.array([[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 5.0]])
        centered = x - x.mean(axis=1, keepdims=True)
        expected = centered / np.sqrt((centered**2).mean(axis=1, keepdims=True) + LN_EPS)
        np.testing.assert_allclose(encoder_forward(x, [layer], config), expected, atol=1e-4)


class TestForward(unittest.TestCase):
    def test_eval_forward_is_deterministic_and_in_range(self):
        params = tiny_params(2, dropout=0.3)
        batch = random_batch(6)
        a = forward(batch, params)
        b = forward(batch, params)
        np.testing.assert_array_equal(a.prob, b.prob)
        self.assertTrue(np.all((a.prob > 0) & (a.prob < 1)))

    def test_dropout_depends_only_on_seed(self):
        params = tiny_params(2, dropout=0.3)
        batch = random_batch(6)
        a = forward(batch, params, train_mode=True, dropout_seed=5)
        b = forward(batch, params, train_mode=True, dropout_seed=5)
        c = forward(batch, params, train_mode=True, dropout_seed=6)
        np.testing.assert_array_equal(a.prob, b.prob)
        self.assertFalse(np.array_equal(a.prob, c.prob))

    def test_gates_read_dropped_out_pooled_embeddings(self):
        params = tiny_params(2, dropout=0.3)
        batch = random_batch(6)
        trace = forward(batch, params, train_mode=True, dropout_seed=5)
        pooled = np.concatenate([trace.pooled[m] for m in FUSION_ORDER], axis=1)
        self.assertIsNotNone(trace.z_mask)
        np.testing.assert_array_equal(trace.z, pooled * trace.z_mask)
        self.assertTrue(np.any(trace.z_mask == 0.0))
        expected = 1.0 / (1.0 + np.exp(-(trace.z @ params["gate.w"].T + params["gate.b"])))
        np.testing.assert_allclose(trace.alpha, expected, rtol=1e-12)

        evaluated = forward(batch, params)
        self.assertIsNone(evaluated.z_mask)

    def test_samples_are_independent(self):
        params = tiny_params(4)
        batch = random_batch(7, seed=3)
        perm = np.random.default_rng(0).permutation(7)
        probs, alphas = predict(params, batch)
        probs_perm, alphas_perm = predict(params, batch.subset(perm))
        np.testing.assert_allclose(probs_perm, probs[perm], rtol=1e-12)
        np.testing.assert_allclose(alphas_perm, alphas[perm], rtol=1e-12)

    def test_predict_chunking_does_not_change_output(self):
        params = tiny_params(4)
        batch = random_batch(9, seed=1)
        a, _ = predict(params, batch, chunk_size=2)
        b, _ = predict(params, batch, chunk_size=64)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_shape_mismatch_is_rejected(self):
        params = tiny_params(0)
        batch = random_batch(2, widths={**GRADCHECK_WIDTHS, Modality.MRI_CT: 5})
        with self.assertRaises(ShapeError):
            forward(batch, params)
        with self.assertRaises(ShapeError):
            forward(random_batch(2), params, config=tiny_config(d_model=4))


class TestWiring(unittest.TestCase):
    def test_disabled_gates_pass_z_through(self):
        params = tiny_params(1, wiring=ModelWiring(gates=False))
        trace = forward(random_batch(3), params)
        np.testing.assert_array_equal(trace.h, trace.z)
        np.testing.assert_array_equal(trace.alpha, np.ones((3, 4)))
        self.assertNotIn("gate.w", params)

    def test_without_cross_attention_pools_encoder_output(self):
        params = tiny_params(1, wiring=ModelWiring(cross_attention=False))
        trace = forward(random_batch(3), params)
        for m in (Modality.MRI_CT, Modality.CLINICAL):
            np.testing.assert_allclose(trace.pooled[m], attention_pool(trace.encoded[m], params[f"{m.value}.pool.q"]))

    def test_cross_attention_needs_both_token_modalities(self):
        wiring = ModelWiring(modalities=(Modality.CLINICAL, Modality.MRI_VOL))
        self.assertFalse(wiring.uses_cross_attention)
        self.assertFalse(any(name.startswith("cross.") for name in build_layout(tiny_config(), GRADCHECK_WIDTHS, wiring).names))

    def test_single_modality_dimensions(self):
        params = tiny_params(0, wiring=ModelWiring(modalities=(Modality.CLINICAL,)))
        self.assertEqual(params["gate.w"].shape, (1, 8))
        trace = forward(random_batch(2), params)
        self.assertEqual(trace.h.shape, (2, 8))

    def test_wiring_orders_modalities_by_fusion_order(self):
        wiring = ModelWiring(modalities=(Modality.DEMOGRAPHIC, Modality.MRI_CT))
        self.assertEqual(wiring.modalities, (Modality.MRI_CT, Modality.DEMOGRAPHIC))
        with self.assertRaises(UsageError):
            ModelWiring(modalities=())


@pytest.mark.parametrize(
    "wiring",
    [
        ModelWiring(),
        ModelWiring(gates=False),
        ModelWiring(cross_attention=False),
        ModelWiring(modalities=(Modality.MRI_CT,)),
        ModelWiring(modalities=(Modality.MRI_CT, Modality.CLINICAL, Modality.MRI_VOL)),
    ],
)
def test_parameter_count_matches_layout(wiring):
    for config in (tiny_config(), SafnConfig(), SafnConfig(d_model=32, n_heads=4, n_layers=3, ffn_multiplier=2)):
        assert parameter_count(config, GRADCHECK_WIDTHS, wiring) == build_layout(config, GRADCHECK_WIDTHS, wiring).size


def test_config_validation():
    with pytest.raises(UsageError):
        SafnConfig(d_model=10, n_heads=4)
    with pytest.raises(UsageError):
        SafnConfig(dropout=1.0)
    with pytest.raises(UsageError):
        SafnConfig(d_model=8, n_heads=2, cross_heads=3)


def test_active_modality_without_features_is_rejected():
    with pytest.raises(ShapeError):
        build_layout(tiny_config(), {**GRADCHECK_WIDTHS, Modality.MRI_VOL: 0})
