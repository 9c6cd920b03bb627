"""PD-vs-HC group comparison: Mann-Whitney U, Cliff's delta, chi-square with Cramer's V, Fisher's exact test, BH-FDR."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from scipy.stats.contingency import association

from safn.core import DataError
from safn.data import MISSING_LEVEL, DatasetSchema, RawTable

logger = logging.getLogger(__name__)

EXACT_LIMIT = 20
FDR_Q = 0.10

MwuMethod = Literal["auto", "exact", "normal"]


class MannWhitneyResult(NamedTuple):
    u: float
    p: float
    method: str


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # keep pytest from collecting it

    variable: str
    test: str
    statistic: float
    p_raw: float
    p_adjusted: float
    effect_size: float
    effect_family: str
    effect_magnitude: str
    summaries: dict[str, str] = field(default_factory=dict)
    significant: bool = False


def _as_sample(values: Sequence[float] | np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DataError(f"Sample {name} is empty")
    return arr


def _u_distance(x: np.ndarray, y: np.ndarray) -> float:
    u = stats.mannwhitneyu(x, y, method="asymptotic").statistic
    return abs(float(u) - x.size * y.size / 2.0)


def mann_whitney_u(
    x: Sequence[float] | np.ndarray,
    y: Sequence[float] | np.ndarray,
    method: MwuMethod = "auto",
) -> MannWhitneyResult:
    """U of ``x`` and a two-sided p.

    ``auto`` is exact when ``n_x * n_y <= 20`` and otherwise uses the
    tie-corrected normal approximation with a 0.5 continuity correction.
    Exact p-values on tied samples come from a full permutation of the
    pooled values, since the closed-form null assumes distinct ranks.
    """
    xs, ys = _as_sample(x, "x"), _as_sample(y, "y")
    pooled = np.concatenate([xs, ys])

    if method == "exact" or (method == "auto" and xs.size * ys.size <= EXACT_LIMIT):
        result = stats.mannwhitneyu(xs, ys, method="asymptotic")
        if np.unique(pooled).size == pooled.size:
            p = stats.mannwhitneyu(xs, ys, method="exact").pvalue
        else:
            p = stats.permutation_test(
                (xs, ys), _u_distance, permutation_type="independent",
                vectorized=False, n_resamples=np.inf, alternative="greater",
            ).pvalue
        return MannWhitneyResult(float(result.statistic), float(min(1.0, p)), "exact")

    if np.ptp(pooled) == 0.0:
        return MannWhitneyResult(xs.size * ys.size / 2.0, 1.0, "normal")
    result = stats.mannwhitneyu(xs, ys, method="asymptotic", use_continuity=True)
    return MannWhitneyResult(float(result.statistic), float(min(1.0, result.pvalue)), "normal")


def cliffs_delta(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> float:
    """(#(x > y) - #(x < y)) / (n_x n_y) over all cross pairs."""
    xs, ys = _as_sample(x, "x"), _as_sample(y, "y")
    return float(np.sign(xs[:, None] - ys[None, :]).mean())


def chi_square_cramers_v(table: Sequence[Sequence[int]] | np.ndarray) -> tuple[float, float, float]:
    """Pearson chi-square (no continuity correction), its p-value and Cramer's V."""
    observed = np.asarray(table, dtype=np.float64)
    if observed.ndim != 2 or min(observed.shape) < 2:
        raise DataError(f"Contingency table must be at least 2x2, got shape {observed.shape}")
    if observed.sum() <= 0 or np.any(observed.sum(axis=1) == 0) or np.any(observed.sum(axis=0) == 0):
        raise DataError("Contingency table has an empty row or column")
    if np.any(observed < 0) or np.any(observed != np.round(observed)):
        raise DataError(f"Contingency table must hold non-negative counts, got {observed.tolist()}")
    chi2, p, _, _ = stats.chi2_contingency(observed, correction=False)
    # association() only takes integer tables
    v = association(observed.astype(np.int64), method="cramer", correction=False)
    return float(chi2), float(p), min(float(v), 1.0)


def fisher_exact_2x2(table: Sequence[Sequence[int]] | np.ndarray) -> float:
    """Two-sided p of Fisher's exact test."""
    t = np.asarray(table, dtype=np.int64)
    if t.shape != (2, 2) or np.any(t < 0):
        raise DataError(f"Fisher's exact test needs a 2x2 table of counts, got {t.tolist()}")
    _, p = stats.fisher_exact(t, alternative="two-sided")
    return float(min(1.0, p))


def bh_fdr(pvalues: Sequence[float] | np.ndarray) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values, returned in input order."""
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    if p.size == 0:
        return p
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise DataError("p-values must lie in [0, 1]")
    return stats.false_discovery_control(p, method="bh")


def delta_magnitude(delta: float) -> str:
    d = abs(delta)
    if d < 0.2:
        return "negligible"
    if d < 0.5:
        return "small"
    if d < 0.8:
        return "medium"
    return "large"


def cramers_v_magnitude(v: float) -> str:
    if v < 0.1:
        return "small"
    if v < 0.3:
        return "medium"
    return "large"


def _median_iqr(values: np.ndarray) -> str:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return f"{med:.2f} [{q1:.2f}, {q3:.2f}]"


def _level_counts(levels: pd.Series) -> str:
    counts = levels.value_counts(sort=False)
    total = int(counts.sum())
    return "; ".join(f"{lvl}: {int(n)} ({100.0 * n / total:.1f}%)" for lvl, n in sorted(counts.items()))


def _numeric_test(hc: np.ndarray, pd_: np.ndarray) -> tuple[str, float, float, float, str, dict[str, str]]:
    mwu = mann_whitney_u(hc, pd_)
    delta = cliffs_delta(hc, pd_)
    summaries = {"HC": _median_iqr(hc), "PD": _median_iqr(pd_)}
    return "mann_whitney_u", mwu.u, mwu.p, delta, "cliffs_delta", summaries


def _categorical_test(name: str, levels: pd.Series, labels: np.ndarray) -> tuple[str, float, float, float, str, dict[str, str]]:
    table = pd.crosstab(levels, labels).reindex(columns=[0, 1], fill_value=0)
    summaries = {"HC": _level_counts(levels[labels == 0]), "PD": _level_counts(levels[labels == 1])}
    if table.shape[0] < 2:
        return "chi_square", 0.0, 1.0, 0.0, "cramers_v", summaries
    chi2, p, v = chi_square_cramers_v(table.to_numpy())
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / table.to_numpy().sum()
    if np.any(expected < 5):
        if table.shape == (2, 2):
            return "fisher_exact", chi2, fisher_exact_2x2(table.to_numpy()), v, "cramers_v", summaries
        logger.warning("Column '%s' has expected counts below 5 in a %dx2 table; using chi-square", name, table.shape[0])
    return "chi_square", chi2, p, v, "cramers_v", summaries


def run_group_analysis(
    table: RawTable,
    schema: DatasetSchema,
    *,
    q: float = FDR_Q,
    first_visit_only: bool = True,
    columns: Sequence[str] | None = None,
) -> list[TestResult]:
    """Test every feature column for an HC/PD difference; results sorted by BH-adjusted p.

    Cliff's delta takes HC as its first argument, so negative values mean larger PD values.
    Missing numeric values are excluded per variable; missing categoricals form their own level.
    """
    frame = table.frame
    if first_visit_only:
        frame = frame.drop_duplicates(subset=[table.subject_id_column], keep="first")
    labels = frame[table.label_column].to_numpy(dtype=np.int64)
    for cls in (0, 1):
        if int(np.sum(labels == cls)) < 2:
            raise DataError(f"Group analysis needs at least 2 samples per group; class {cls} has fewer")

    raw: list[tuple[str, tuple[str, float, float, float, str, dict[str, str]]]] = []
    for col in columns if columns is not None else schema.feature_columns:
        if schema.is_categorical(col):
            levels = frame[col].map(lambda v: MISSING_LEVEL if v is None or (isinstance(v, float) and math.isnan(v)) else str(v))
            raw.append((col, _categorical_test(col, levels.reset_index(drop=True), labels)))
            continue
        values = frame[col].to_numpy(dtype=np.float64)
        hc = values[(labels == 0) & ~np.isnan(values)]
        pd_ = values[(labels == 1) & ~np.isnan(values)]
        if hc.size == 0 or pd_.size == 0:
            logger.warning("Skipping '%s': a group has no observed values", col)
            continue
        raw.append((col, _numeric_test(hc, pd_)))

    adjusted = bh_fdr([r[1][2] for r in raw])
    results = []
    for (col, (test, stat, p, effect, family, summaries)), p_adj in zip(raw, adjusted):
        magnitude = delta_magnitude(effect) if family == "cliffs_delta" else cramers_v_magnitude(effect)
        results.append(TestResult(
            variable=col,
            test=test,
            statistic=float(stat),
            p_raw=float(p),
            p_adjusted=float(p_adj),
            effect_size=float(effect),
            effect_family=family,
            effect_magnitude=magnitude,
            summaries=summaries,
            significant=bool(p_adj < q),
        ))
    results.sort(key=lambda r: (r.p_adjusted, r.p_raw, r.variable))
    logger.info("Group analysis: %d variables, %d significant at q=%.2f", len(results), sum(r.significant for r in results), q)
    return results


def results_frame(results: Sequence[TestResult]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "variable": r.variable,
            "hc": r.summaries.get("HC", ""),
            "pd": r.summaries.get("PD", ""),
            "test": r.test,
            "statistic": r.statistic,
            "p_raw": r.p_raw,
            "p_fdr": r.p_adjusted,
            "effect_size": r.effect_size,
            "effect_family": r.effect_family,
            "magnitude": r.effect_magnitude,
            "significant": r.significant,
        }
        for r in results
    ], columns=["variable", "hc", "pd", "test", "statistic", "p_raw", "p_fdr", "effect_size", "effect_family", "magnitude", "significant"])


def write_stats_csv(path: str | Path, results: Sequence[TestResult]) -> Path:
    out = Path(path)
    results_frame(results).to_csv(out, index=False, float_format="%.6g")
    return out
