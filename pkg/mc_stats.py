"""Monte-Carlo summary statistics shared by the experiment modules."""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

LOG2E = math.log2(math.e)


def wilson_interval(successes, trials, z=1.959963984540054):
    """Two-sided Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def plugin_entropy_bits(values) -> float:
    """Plug-in entropy of the empirical distribution of integer-valued samples."""
    _, counts = np.unique(np.asarray(values), return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def plugin_entropy_stderr(values) -> float:
    """Delta-method standard error of the plug-in entropy."""
    values = np.asarray(values)
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    surprisal = -np.log2(counts / counts.sum())[inverse]
    return float(np.std(surprisal) / math.sqrt(values.size)) if values.size > 1 else 0.0


def mean_and_stderr(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float(values.mean()) if values.size else float("nan"), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def equal_probability_edges(model, bins) -> np.ndarray:
    """Interior edges splitting a scalar model into equal-probability cells."""
    if bins < 2:
        raise ValueError("a partition needs at least two bins")
    return np.asarray(model.ppf(np.arange(1, bins) / bins), dtype=np.float64)


def histogram_counts(samples, edges) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    return np.bincount(np.searchsorted(edges, samples, side="right"), minlength=len(edges) + 1)


def histogram_tv(counts_a, counts_b) -> float:
    pa = counts_a / counts_a.sum()
    pb = counts_b / counts_b.sum()
    return 0.5 * float(np.abs(pa - pb).sum())


def binned_tv(model_a, model_b, edges) -> float:
    """Exact TV between two scalar models coarse-grained to the same cells."""
    grid = np.concatenate(([-np.inf], np.asarray(edges, dtype=np.float64), [np.inf]))
    mass_a = np.diff(np.asarray(model_a.cdf(grid), dtype=np.float64))
    mass_b = np.diff(np.asarray(model_b.cdf(grid), dtype=np.float64))
    return 0.5 * float(np.abs(mass_a - mass_b).sum())


@dataclass(frozen=True)
class TvEstimate:
    tv: float
    ci_lo: float
    ci_hi: float
    null_floor: float
    debiased: float
    bins: int
    trials: int
    warning: Optional[str] = None


def bootstrap_tv(samples_a, samples_b, edges, resamples=200, seed=0, level=0.95) -> TvEstimate:
    """Histogram TV with a bootstrap CI and a same-distribution noise floor.

    The floor is the mean TV between two multinomial draws from the pooled
    histogram; `debiased` subtracts it from the raw estimate.
    """
    counts_a = histogram_counts(samples_a, edges)
    counts_b = histogram_counts(samples_b, edges)
    na, nb = int(counts_a.sum()), int(counts_b.sum())
    tv = histogram_tv(counts_a, counts_b)
    rng = np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 64) - 1)))
    pa, pb = counts_a / na, counts_b / nb
    pooled = (counts_a + counts_b) / (na + nb)
    boot = np.empty(resamples)
    null = np.empty(resamples)
    for r in range(resamples):
        boot[r] = histogram_tv(rng.multinomial(na, pa), rng.multinomial(nb, pb))
        null[r] = histogram_tv(rng.multinomial(na, pooled), rng.multinomial(nb, pooled))
    floor = float(null.mean())
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(boot - floor, [alpha, 1.0 - alpha])
    warning = None
    if min(na, nb) < 5 * (len(edges) + 1):
        warning = "too_few_trials"
        logger.warning(f"[bootstrap_tv] {min(na, nb)} samples for {len(edges) + 1} bins; estimate is noise dominated")
    return TvEstimate(tv=tv, ci_lo=max(0.0, float(lo)), ci_hi=max(0.0, float(hi)), null_floor=floor,
                      debiased=max(0.0, tv - floor), bins=len(edges) + 1, trials=min(na, nb), warning=warning)


def chi_square_gof(samples, model, bins=64):
    """Pearson chi-square against a scalar model on equal-probability cells."""
    edges = equal_probability_edges(model, bins)
    observed = histogram_counts(samples, edges)
    expected = np.full(bins, observed.sum() / bins)
    result = stats.chisquare(observed, expected)
    return float(result.statistic), float(result.pvalue)
