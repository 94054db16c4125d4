"""
Enrichment post-test for called TADs

Within-TAD and surrounding distance-decay profiles are estimated from the
contact weights, and a one-sided Wilcoxon rank-sum test checks whether the
within-TAD profile dominates the surrounding one.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import false_discovery_control, norm, rankdata, tiecorrect

from src.data.contact_data import ContactMatrix
from src.utils.errors import InsufficientDistancesError, ValidationError

if TYPE_CHECKING:
    from src.core.hierarchy import TadCall

logger = logging.getLogger("tadlp.posttest")

EXACT_AUTO_LIMIT = 12


@dataclass(frozen=True, eq=False)
class DecayProfiles:
    """Mean contact weight per distance inside the interval (f_hat) and around it (g_hat)"""

    f_hat: np.ndarray
    g_hat: np.ndarray
    d_max: int
    distances: np.ndarray


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    n1: int
    n2: int
    method: str

    __test__ = False


def decay_profiles(matrix: ContactMatrix, a: int, b: int,
                   clip_bounds: Optional[Tuple[int, int]] = None) -> DecayProfiles:
    """
    Distance-stratified means inside [a, b] and in its surrounding square

    The surrounding square extends the interval by h = floor((b - a) / 2) bins
    on each side, clipped to clip_bounds (inclusive). Distances run over
    1..h; the diagonal is excluded. Each mean divides by the number of pairs
    actually present in its stratum, and a distance with no surrounding pairs
    is dropped from both profiles.

    Args:
        matrix: Contact weights
        a: First bin of the interval
        b: Last bin of the interval
        clip_bounds: Inclusive (lo, hi) limits for the surrounding square;
            defaults to the matrix bounds

    Raises:
        InsufficientDistancesError: h < 2
    """
    n = matrix.n
    if not 0 <= a < b < n:
        raise ValidationError(f"invalid interval [{a},{b}] for n={n}")
    lo, hi = clip_bounds if clip_bounds is not None else (0, n - 1)
    if not (lo <= a and b <= hi):
        raise ValidationError(f"interval [{a},{b}] lies outside clip bounds [{lo},{hi}]")

    h = (b - a) // 2
    if h < 2:
        raise InsufficientDistancesError(f"insufficient distances: interval [{a},{b}] gives h={h}")

    s, e = max(a - h, lo), min(b + h, hi)
    W = matrix.weights
    distances, f_hat, g_hat = [], [], []
    for d in range(1, h + 1):
        diagonal = np.diagonal(W, offset=d)
        # pairs (i, i + d) with both ends in [a, b] / in [s, e]
        inside = diagonal[a:b - d + 1]
        around = np.concatenate([diagonal[s:a], diagonal[b - d + 1:e - d + 1]])
        if around.size == 0:
            continue
        distances.append(d)
        f_hat.append(inside.mean())
        g_hat.append(around.mean())

    if not distances:
        raise InsufficientDistancesError(f"no surrounding pairs for [{a},{b}] within [{lo},{hi}]")
    if len(distances) < h:
        logger.debug(f"Dropped {h - len(distances)} empty distance strata for [{a},{b}]")
    return DecayProfiles(f_hat=np.array(f_hat), g_hat=np.array(g_hat), d_max=h, distances=np.array(distances))


def _exact_tails(ranks: np.ndarray, n1: int, statistic: float) -> Tuple[float, float]:
    """P(W >= statistic) and P(W <= statistic) under all equally likely rank assignments"""
    # midranks are multiples of 1/2; doubled they index an integer knapsack
    scores = np.rint(2 * ranks).astype(np.int64)
    total = int(scores.sum())
    counts = np.zeros((n1 + 1, total + 1))
    counts[0, 0] = 1.0
    for score in scores:
        shifted = counts[:-1, :total + 1 - score].copy()
        counts[1:, score:] += shifted
    distribution = counts[n1]
    observed = int(np.rint(2 * statistic))
    size = distribution.sum()
    return distribution[observed:].sum() / size, distribution[:observed + 1].sum() / size


def wilcoxon_rank_sum(x: Sequence[float], y: Sequence[float], alternative: str = "greater",
                      exact: Union[str, bool] = "auto") -> TestResult:
    """
    Two-sample Wilcoxon rank-sum test

    Args:
        x: First sample; its rank sum is the statistic
        y: Second sample
        alternative: "greater" (x stochastically dominates y), "less" or "two-sided"
        exact: True for the exact permutation distribution, False for the
            normal approximation (tie and continuity corrected), "auto" for
            exact when len(x) + len(y) <= 12

    Returns:
        TestResult
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ValidationError("wilcoxon_rank_sum needs non-empty samples")
    if alternative not in ("greater", "less", "two-sided"):
        raise ValueError(f"unknown alternative: {alternative}")

    ranks = rankdata(np.concatenate([x, y]))
    statistic = float(ranks[:n1].sum())
    N = n1 + n2
    use_exact = N <= EXACT_AUTO_LIMIT if exact == "auto" else bool(exact)

    if use_exact:
        upper, lower = _exact_tails(ranks, n1, statistic)
        method = "exact"
    else:
        method = "normal-approximation"
        mean = n1 * (N + 1) / 2.0
        variance = n1 * n2 * (N + 1) / 12.0 * tiecorrect(ranks)
        if variance <= 0:
            return TestResult(statistic, 1.0, n1, n2, method)
        sd = np.sqrt(variance)
        upper = float(norm.sf((statistic - mean - 0.5) / sd))
        lower = float(norm.cdf((statistic - mean + 0.5) / sd))

    if alternative == "greater":
        pvalue = upper
    elif alternative == "less":
        pvalue = lower
    else:
        pvalue = 2.0 * min(upper, lower)
    return TestResult(statistic, float(np.clip(pvalue, 0.0, 1.0)), n1, n2, method)


def test_tad(matrix: ContactMatrix, call: "TadCall", parent_bounds: Optional[Tuple[int, int]] = None) -> TestResult:
    """
    Test whether a call's decay profile dominates its surroundings

    Args:
        matrix: Contact weights the call was made on (region bins)
        call: Interval with attributes a and b
        parent_bounds: Inclusive bounds of the parent TAD for nested calls;
            the surrounding square never leaves them

    Returns:
        One-sided TestResult; the caller keeps the call iff pvalue < cutoff
    """
    profiles = decay_profiles(matrix, call.a, call.b, clip_bounds=parent_bounds)
    return wilcoxon_rank_sum(profiles.f_hat, profiles.g_hat, alternative="greater")


def adjust_pvalues(pvalues: Sequence[float], method: str = "bh") -> np.ndarray:
    """Benjamini-Hochberg ("bh") or Benjamini-Yekutieli ("by") adjusted p-values"""
    pvalues = np.asarray(pvalues, dtype=np.float64)
    if pvalues.size == 0:
        return pvalues
    return false_discovery_control(pvalues, method=method)
