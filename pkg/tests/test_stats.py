import itertools
import unittest

import numpy as np
import pandas as pd
import pytest
from scipy import stats as scipy_stats
from scipy.stats.contingency import association

from safn.core import DataError
from safn.data import DatasetSchema, RawTable
from safn.stats import (
    bh_fdr,
    chi_square_cramers_v,
    cliffs_delta,
    cramers_v_magnitude,
    delta_magnitude,
    fisher_exact_2x2,
    mann_whitney_u,
    results_frame,
    run_group_analysis,
    write_stats_csv,
)


class TestMannWhitney(unittest.TestCase):
    def test_exact_example(self):
        result = mann_whitney_u([1, 2, 3], [4, 5, 6, 7])
        self.assertEqual(result.method, "exact")
        self.assertEqual(result.u, 0.0)
        self.assertAlmostEqual(result.p, 2 / 35)

    def test_exact_matches_enumeration_and_scipy(self):
        rng = np.random.default_rng(0)
        for nx, ny in ((2, 3), (3, 5), (4, 5), (2, 10)):
            pooled = rng.permutation(nx + ny).astype(float)
            x, y = pooled[:nx], pooled[nx:]
            result = mann_whitney_u(x, y)
            self.assertEqual(result.method, "exact")

            u_obs = sum(float(a > b) for a in x for b in y)
            self.assertEqual(result.u, u_obs)
            mu = nx * ny / 2
            counts = []
            for chosen in itertools.combinations(pooled, nx):
                rest = [v for v in pooled if v not in chosen]
                counts.append(sum(float(a > b) for a in chosen for b in rest))
            brute = np.mean(np.abs(np.array(counts) - mu) >= abs(u_obs - mu))
            self.assertAlmostEqual(result.p, brute, places=12)
            self.assertAlmostEqual(result.p, scipy_stats.mannwhitneyu(x, y, method="exact").pvalue, places=12)

    def test_exact_with_ties_enumerates_midranks(self):
        x, y = [1.0, 2.0, 2.0], [2.0, 3.0, 3.0, 4.0]
        result = mann_whitney_u(x, y)
        self.assertEqual(result.method, "exact")
        self.assertEqual(result.u, 1.0)

        pooled = np.array(x + y)
        ranks = scipy_stats.rankdata(pooled)
        mu = 3 * 4 / 2
        observed = abs(result.u - mu)
        hits = [
            abs(ranks[list(chosen)].sum() - 6 - mu) >= observed - 1e-9
            for chosen in itertools.combinations(range(7), 3)
        ]
        self.assertAlmostEqual(result.p, np.mean(hits), places=12)

    def test_normal_approximation_matches_scipy_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.integers(0, 8, size=15).astype(float)
            y = rng.integers(2, 10, size=12).astype(float)
            result = mann_whitney_u(x, y)
            expected = scipy_stats.mannwhitneyu(x, y, method="asymptotic", use_continuity=True)
            self.assertEqual(result.method, "normal")
            self.assertAlmostEqual(result.u, float(expected.statistic))
            self.assertAlmostEqual(result.p, float(expected.pvalue), places=12)

    def test_all_tied_samples(self):
        result = mann_whitney_u([1.0] * 5, [1.0] * 5)
        self.assertEqual(result.method, "normal")
        self.assertEqual(result.p, 1.0)

    def test_forced_method(self):
        self.assertEqual(mann_whitney_u([1, 2], [3, 4], method="normal").method, "normal")
        with self.assertRaises(DataError):
            mann_whitney_u([], [1.0])


class TestEffectSizes(unittest.TestCase):
    def test_cliffs_delta(self):
        self.assertAlmostEqual(cliffs_delta([1, 2, 3], [2, 3, 4]), -5 / 9)
        self.assertEqual(cliffs_delta([5, 6], [1, 2]), 1.0)
        self.assertEqual(cliffs_delta([1, 1], [1]), 0.0)

    def test_magnitude_labels(self):
        self.assertEqual(
            [delta_magnitude(d) for d in (0.19, -0.3, 0.5, -0.8)],
            ["negligible", "small", "medium", "large"],
        )
        self.assertEqual([cramers_v_magnitude(v) for v in (0.05, 0.1, 0.3)], ["small", "medium", "large"])


class TestContingency(unittest.TestCase):
    def test_chi_square_example(self):
        chi2, p, v = chi_square_cramers_v([[10, 20], [20, 10]])
        self.assertAlmostEqual(chi2, 20 / 3)
        self.assertAlmostEqual(v, 1 / 3)
        self.assertAlmostEqual(p, scipy_stats.chi2.sf(20 / 3, 1), places=12)

    def test_chi_square_matches_scipy(self):
        table = np.array([[12, 7], [5, 14], [9, 9]])
        chi2, p, v = chi_square_cramers_v(table)
        expected = scipy_stats.chi2_contingency(table, correction=False)
        self.assertAlmostEqual(chi2, expected.statistic)
        self.assertAlmostEqual(p, expected.pvalue, places=12)
        self.assertAlmostEqual(v, association(table, method="cramer"), places=12)

    def test_degenerate_tables(self):
        with self.assertRaises(DataError):
            chi_square_cramers_v([[1, 2, 3]])
        with self.assertRaises(DataError):
            chi_square_cramers_v([[0, 0], [3, 4]])
        with self.assertRaises(DataError):
            chi_square_cramers_v([[1.5, 2], [3, 4]])

    def test_fisher_matches_scipy(self):
        for table in ([[3, 1], [1, 3]], [[8, 2], [1, 5]], [[0, 5], [6, 1]], [[5, 4], [5, 6]]):
            self.assertAlmostEqual(fisher_exact_2x2(table), scipy_stats.fisher_exact(table).pvalue, places=10)
        with self.assertRaises(DataError):
            fisher_exact_2x2([[1, 2, 3], [4, 5, 6]])
        with self.assertRaises(DataError):
            fisher_exact_2x2([[1, -2], [3, 4]])


class TestFdr(unittest.TestCase):
    def test_step_up_example(self):
        np.testing.assert_allclose(bh_fdr([0.005, 0.01, 0.03, 0.04]), [0.02, 0.02, 0.04, 0.04])

    def test_input_order_is_kept(self):
        np.testing.assert_allclose(bh_fdr([0.04, 0.005, 0.03, 0.01]), [0.04, 0.02, 0.04, 0.02])

    def test_matches_scipy_and_is_monotone(self):
        p = np.random.default_rng(2).uniform(size=25) ** 2
        adjusted = bh_fdr(p)
        np.testing.assert_allclose(adjusted, scipy_stats.false_discovery_control(p, method="bh"))
        order = np.argsort(p)
        self.assertTrue(np.all(np.diff(adjusted[order]) >= 0))
        self.assertTrue(np.all(adjusted >= p))

    def test_invalid_p(self):
        with self.assertRaises(DataError):
            bh_fdr([0.2, 1.5])
        self.assertEqual(bh_fdr([]).size, 0)


SCHEMA = DatasetSchema(
    modality_assignment={"UPDRS": "clinical", "SEX": "demographic", "SITE": "demographic"},
    label_column="COHORT",
    subject_id_column="PATNO",
    categorical_columns={"SEX", "SITE"},
)


@pytest.fixture
def cohort():
    rows = []
    for i in range(10):
        rows.append({"PATNO": f"H{i}", "COHORT": 0, "UPDRS": float(i), "SEX": "M" if i < 5 else "F", "SITE": "A"})
    for i in range(10):
        rows.append({"PATNO": f"P{i}", "COHORT": 1, "UPDRS": 20.0 + i, "SEX": "M" if i < 6 else "F", "SITE": "A"})
    rows.append({"PATNO": "H0", "COHORT": 0, "UPDRS": 100.0, "SEX": "M", "SITE": "A"})
    return RawTable(frame=pd.DataFrame(rows), label_column="COHORT", subject_id_column="PATNO")


def test_group_analysis_picks_the_right_test(cohort):
    results = {r.variable: r for r in run_group_analysis(cohort, SCHEMA)}

    updrs = results["UPDRS"]
    assert updrs.test == "mann_whitney_u"
    assert updrs.effect_size == -1.0
    assert updrs.effect_magnitude == "large"
    assert updrs.significant
    assert updrs.summaries["HC"] == "4.50 [2.25, 6.75]"

    sex = results["SEX"]
    assert sex.test == "fisher_exact"
    assert sex.p_raw == pytest.approx(scipy_stats.fisher_exact([[5, 4], [5, 6]]).pvalue)
    assert sex.effect_family == "cramers_v"
    assert not sex.significant

    site = results["SITE"]
    assert site.test == "chi_square"
    assert site.p_raw == 1.0
    assert site.effect_size == 0.0


def test_group_analysis_orders_by_adjusted_p(cohort):
    results = run_group_analysis(cohort, SCHEMA)
    assert results[0].variable == "UPDRS"
    adjusted = [r.p_adjusted for r in results]
    assert adjusted == sorted(adjusted)
    np.testing.assert_allclose(sorted(bh_fdr([r.p_raw for r in results])), adjusted)


def test_repeat_visits_count_when_requested(cohort):
    first = {r.variable: r for r in run_group_analysis(cohort, SCHEMA)}
    every = {r.variable: r for r in run_group_analysis(cohort, SCHEMA, first_visit_only=False)}
    assert first["UPDRS"].statistic != every["UPDRS"].statistic
    only = run_group_analysis(cohort, SCHEMA, columns=["UPDRS"])
    assert [r.variable for r in only] == ["UPDRS"]


def test_group_analysis_needs_two_per_class(cohort):
    frame = cohort.frame[(cohort.frame["COHORT"] == 1) | (cohort.frame["PATNO"] == "H1")]
    with pytest.raises(DataError):
        run_group_analysis(RawTable(frame, "COHORT", "PATNO"), SCHEMA)


def test_missing_categorical_forms_a_level(cohort):
    frame = cohort.frame.copy()
    frame.loc[[0, 1, 10], "SEX"] = None
    results = {r.variable: r for r in run_group_analysis(RawTable(frame, "COHORT", "PATNO"), SCHEMA)}
    assert "nan" in results["SEX"].summaries["HC"]
    assert results["SEX"].test == "chi_square"


def test_results_csv(tmp_path, cohort):
    results = run_group_analysis(cohort, SCHEMA)
    frame = pd.read_csv(write_stats_csv(tmp_path / "stats.csv", results))
    assert list(frame.columns) == list(results_frame(results).columns)
    assert list(frame.columns)[:4] == ["variable", "hc", "pd", "test"]
    assert len(frame) == 3
