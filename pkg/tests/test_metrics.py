import math
import unittest

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import average_precision_score, balanced_accuracy_score, f1_score, roc_auc_score

from safn.core import DataError, Modality, NumericError
from safn.metrics import (
    THRESHOLD_GRID,
    ConfusionMatrix,
    aggregate_reports,
    best_f1_threshold,
    confusion,
    evaluate_predictions,
    format_mean_sd,
    mean_curve,
    metrics_frame,
    pr_auc,
    roc_auc,
    thresholded_metrics,
    write_confusion_csv,
    write_metrics_csv,
)


class TestThresholded(unittest.TestCase):
    def test_confusion_counts(self):
        self.assertEqual(confusion([0.9, 0.2], [1, 0]), ConfusionMatrix(tp=1, tn=1, fp=0, fn=0))
        self.assertEqual(confusion([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]), ConfusionMatrix(tp=1, tn=1, fp=1, fn=1))

    def test_probability_at_threshold_is_positive(self):
        self.assertEqual(confusion([0.5], [1]).tp, 1)

    def test_hand_computed_metrics(self):
        m = thresholded_metrics(ConfusionMatrix(tp=2, tn=3, fp=1, fn=0))
        self.assertAlmostEqual(m.accuracy, 5 / 6)
        self.assertAlmostEqual(m.precision, 2 / 3)
        self.assertAlmostEqual(m.recall, 1.0)
        self.assertAlmostEqual(m.f1, 4 / 5)
        self.assertAlmostEqual(m.balanced_accuracy, 0.875)
        self.assertEqual(m.degenerate, frozenset())

    def test_perfect_and_degenerate(self):
        perfect = thresholded_metrics(ConfusionMatrix(tp=3, tn=2, fp=0, fn=0))
        self.assertEqual((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0))
        none_called = thresholded_metrics(ConfusionMatrix(tp=0, tn=4, fp=0, fn=2))
        self.assertEqual(none_called.precision, 0.0)
        self.assertIn("precision", none_called.degenerate)
        with self.assertRaises(DataError):
            thresholded_metrics(ConfusionMatrix(0, 0, 0, 0))

    def test_against_sklearn(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            y = rng.integers(0, 2, size=40)
            p = np.clip(y * 0.3 + rng.uniform(size=40) * 0.7, 0, 1)
            m = thresholded_metrics(confusion(p, y))
            pred = (p >= 0.5).astype(int)
            self.assertAlmostEqual(m.balanced_accuracy, balanced_accuracy_score(y, pred))
            self.assertAlmostEqual(m.f1, f1_score(y, pred, zero_division=0))


class TestRanking(unittest.TestCase):
    def test_roc_auc_examples(self):
        self.assertEqual(roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0], 1.0)
        self.assertAlmostEqual(roc_auc([0.9, 0.4, 0.8, 0.3], [1, 1, 0, 0])[0], 0.75)
        self.assertEqual(roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0])[0], 0.5)

    def test_roc_auc_single_class(self):
        with self.assertRaises(NumericError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_pr_auc_examples(self):
        self.assertEqual(pr_auc([0.9, 0.8, 0.2], [1, 1, 0])[0], 1.0)
        self.assertAlmostEqual(pr_auc([0.9, 0.8, 0.7], [1, 0, 1])[0], 5 / 6)
        self.assertAlmostEqual(pr_auc([0.3, 0.6, 0.1], [1, 1, 1])[0], 1.0)
        with self.assertRaises(NumericError):
            pr_auc([0.3, 0.6], [0, 0])

    def test_against_sklearn_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            y = rng.integers(0, 2, size=30)
            y[:2] = [0, 1]
            p = np.round(rng.uniform(size=30), 1)
            self.assertAlmostEqual(roc_auc(p, y)[0], roc_auc_score(y, p), places=12)
            self.assertAlmostEqual(pr_auc(p, y)[0], average_precision_score(y, p), places=12)

    def test_pair_counting_and_step_sum_on_small_fixtures(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(2, 13))
            y = rng.integers(0, 2, size=n)
            y[rng.choice(n, size=2, replace=False)] = [0, 1]
            p = np.round(rng.uniform(size=n), 1)

            pos, neg = p[y == 1], p[y == 0]
            pairs = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
            self.assertAlmostEqual(roc_auc(p, y)[0], pairs / (pos.size * neg.size), places=12)

            ap, last_recall = 0.0, 0.0
            for t in sorted(set(p.tolist()), reverse=True):
                called = p >= t
                tp = int(np.sum(called & (y == 1)))
                recall = tp / pos.size
                ap += (recall - last_recall) * tp / int(np.sum(called))
                last_recall = recall
            self.assertAlmostEqual(pr_auc(p, y)[0], ap, places=12)

    def test_pr_curve_starts_at_zero_recall(self):
        _, curve = pr_auc([0.9, 0.8, 0.7], [1, 0, 1])
        self.assertEqual(curve.points[0], (0.0, 1.0))
        self.assertTrue(np.all(np.diff(curve.x) >= 0))
        self.assertEqual(curve.x[-1], 1.0)

    def test_roc_curve_endpoints(self):
        _, curve = roc_auc([0.9, 0.4, 0.8, 0.3], [1, 1, 0, 0])
        self.assertEqual(curve.points[0], (0.0, 0.0))
        self.assertEqual(curve.points[-1], (1.0, 1.0))
        self.assertEqual(list(curve.to_frame().columns), ["fpr", "tpr"])


class TestBestThreshold(unittest.TestCase):
    def test_smallest_maximising_threshold(self):
        # any t in (0.3, 0.7] separates perfectly; smallest grid point is 0.31
        t, f1 = best_f1_threshold([0.3, 0.2, 0.7, 0.9], [0, 0, 1, 1])
        self.assertAlmostEqual(t, 0.31)
        self.assertEqual(f1, 1.0)

    def test_grid_bounds(self):
        self.assertAlmostEqual(THRESHOLD_GRID[0], 0.05)
        self.assertAlmostEqual(THRESHOLD_GRID[-1], 0.95)
        self.assertEqual(THRESHOLD_GRID.size, 91)


def _report(probs, labels, fold, gates=None):
    return evaluate_predictions(np.array(probs), np.array(labels), gate_means=gates, fold=fold)


class TestAggregate(unittest.TestCase):
    def setUp(self):
        self.reports = [
            _report([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0], 0, {Modality.CLINICAL: 0.6}),
            _report([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0], 1, {Modality.CLINICAL: 0.2}),
            _report([0.7, 0.2, 0.6, 0.5], [1, 1, 0, 0], 2, {Modality.CLINICAL: 0.4}),
        ]

    def test_mean_and_sample_sd(self):
        agg = aggregate_reports(self.reports)
        aucs = np.array([r.roc_auc for r in self.reports])
        self.assertAlmostEqual(agg.mean["roc_auc"], aucs.mean())
        self.assertAlmostEqual(agg.sd["roc_auc"], aucs.std(ddof=1))
        self.assertAlmostEqual(agg.gate_means[Modality.CLINICAL], 0.4)
        np.testing.assert_allclose(agg.confusion.sum(), 4.0)

    def test_single_fold_has_zero_sd(self):
        agg = aggregate_reports(self.reports[:1])
        self.assertEqual(agg.sd["accuracy"], 0.0)

    def test_mean_curve_is_anchored(self):
        agg = aggregate_reports(self.reports)
        self.assertEqual(agg.roc_curve.y[0], 0.0)
        self.assertEqual(agg.roc_curve.y[-1], 1.0)
        self.assertTrue(np.all(np.diff(agg.roc_curve.y) >= -1e-12))
        self.assertAlmostEqual(agg.roc_curve.auc, agg.mean["roc_auc"])
        with self.assertRaises(DataError):
            mean_curve([])

    def test_single_class_fold_is_degenerate(self):
        report = _report([0.7, 0.8], [1, 1], 0)
        self.assertTrue(math.isnan(report.roc_auc))
        self.assertIn("roc_auc", report.degenerate)
        agg = aggregate_reports([report, *self.reports])
        self.assertAlmostEqual(agg.mean["roc_auc"], np.mean([r.roc_auc for r in self.reports]))

    def test_metrics_frame(self):
        agg = aggregate_reports(self.reports)
        frame = metrics_frame(agg)
        self.assertEqual(len(frame), 4)
        self.assertEqual(list(frame["fold"]), [0, 1, 2, "mean"])
        self.assertIn("roc_auc_sd", frame.columns)
        self.assertEqual(format_mean_sd(agg, "accuracy"), f"{agg.mean['accuracy']:.2f} ± {agg.sd['accuracy']:.2f}")


def test_csv_outputs(tmp_path):
    reports = [_report([0.9, 0.2, 0.6, 0.4], [1, 0, 1, 0], i) for i in range(2)]
    agg = aggregate_reports(reports)
    path = write_metrics_csv(tmp_path / "metrics.csv", agg)
    frame = pd.read_csv(path)
    assert frame.shape[0] == 3
    assert frame.loc[2, "accuracy"] == pytest.approx(1.0)

    cm = pd.read_csv(write_confusion_csv(tmp_path / "cm.csv", agg.confusion), index_col=0)
    assert list(cm.columns) == ["pred_hc", "pred_pd"]
    assert cm.loc["true_pd", "pred_pd"] == pytest.approx(2.0)


def test_mismatched_inputs():
    with pytest.raises(DataError):
        confusion([0.1, 0.2], [1])
    with pytest.raises(DataError):
        confusion([], [])
    with pytest.raises(DataError):
        confusion([0.1], [2])
