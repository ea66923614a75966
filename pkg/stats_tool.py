"""
Correlation, regression and paired-test statistics shared across the lab.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.stats import pearsonr, rankdata, wilcoxon

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


class StatisticsError(ValueError):
    """Raised when a statistic is requested on unusable inputs."""


def seed_sequence(seed=None) -> np.random.SeedSequence:
    """Wrap an int, None or an existing SeedSequence without re-wrapping."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _paired(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise StatisticsError(f"paired inputs differ in length: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def pearson(a, b) -> Optional[float]:
    """Pearson coefficient, or None when either side has zero variance."""
    a, b = _paired(a, b)
    if a.shape[0] < 2:
        raise StatisticsError("pearson needs at least 2 points")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return None
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return None
    r = float(pearsonr(a, b)[0])
    if not np.isfinite(r):
        return None
    return float(np.clip(r, -1.0, 1.0))


def spearman(y_a, y_b) -> Optional[float]:
    """
    Spearman rank coefficient with average ranks for ties.

    Returns None ("undefined") when either vector is constant.
    """
    a, b = _paired(y_a, y_b)
    if a.shape[0] < 2:
        raise StatisticsError("spearman needs at least 2 points")
    return pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def rmsd(y_true, y_pred) -> float:
    t, p = _paired(y_true, y_pred)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def r_squared(y_true, y_pred) -> float:
    t, p = _paired(y_true, y_pred)
    ss_tot = np.sum((t - t.mean()) ** 2)
    if ss_tot == 0.0:
        return float("nan")
    return float(1.0 - np.sum((t - p) ** 2) / ss_tot)


def regression_metrics(y_true, y_pred) -> Dict[str, float]:
    r = pearson(y_true, y_pred) if len(np.ravel(y_true)) >= 2 else None
    return {
        "rmsd": rmsd(y_true, y_pred),
        "r2": r_squared(y_true, y_pred),
        "pearson": float("nan") if r is None else r,
    }


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str


def _exact_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """
    Two-sided paired Wilcoxon signed-rank test on a - b.

    Zero differences are dropped. Ties share average ranks. p-values come
    from scipy: exact for n <= 25, a tie-corrected, continuity-corrected
    normal approximation above that. scipy has no exact distribution for
    tied ranks, so that case enumerates the null over the doubled ranks.

    Args:
        a, b: paired samples of equal length
        method: "auto", "exact" or "approx"
    """
    if method not in ("auto", "exact", "approx"):
        raise StatisticsError(f"unknown method {method!r}")
    a, b = _paired(a, b)
    d = a - b
    d = d[d != 0.0]
    n = d.shape[0]
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n=0, method="degenerate")
    if n < 5:
        logger.warning(f"Wilcoxon test on only {n} nonzero differences; p-values are coarse")

    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_WILCOXON_MAX_N else "approx"

    if method == "exact":
        if np.unique(ranks).size == n:
            p = float(wilcoxon(d, zero_method="wilcox", alternative="two-sided", method="exact").pvalue)
        else:
            doubled = np.rint(2.0 * ranks).astype(int)
            probs = _exact_null_counts(doubled) / 2.0 ** n
            w2 = int(round(2.0 * w_plus))
            p = 2.0 * min(probs[: w2 + 1].sum(), probs[w2:].sum())
        return WilcoxonResult(statistic=w_plus, p_value=float(min(1.0, p)), n=n, method="exact")

    p = float(wilcoxon(d, zero_method="wilcox", correction=True, alternative="two-sided", method="approx").pvalue)
    return WilcoxonResult(statistic=w_plus, p_value=float(min(1.0, p)) if np.isfinite(p) else 1.0, n=n, method="approx")


def five_number_summary(values: Sequence[float]) -> Dict[str, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise StatisticsError("cannot summarize an empty sample")
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]), "q3": float(q[3]), "max": float(q[4])}


def standard_error(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float("nan")
    return float(v.std(ddof=1) / np.sqrt(v.size))
