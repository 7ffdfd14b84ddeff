"""
Multiple importance sampling with stratified pools, and the ordered-random-coding baseline.

A stratified pool draws its first half from p1 and its second half from p2;
importance weights use the mixture (p1 + p2)/2 in the denominator, so the
rank-coding scheme applies unchanged. ORC instead assigns sorted exponentials
to samples in enumeration order, which is only unbiased for i.i.d. pools.
"""
import dataclasses
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from core_sampling import (DegenerateWeightsError, GaussianModel, MixtureModel, ProbabilityModel, ProposalPool,
                           RandomStream, Selection, importance_log_weight, rank_of, resolve_target, select_index)
from mc_stats import chi_square_gof, plugin_entropy_bits
from models_gaussian import GaussMix

logger = logging.getLogger(__name__)

SCHEMES = ("ce_is", "orc")


@dataclass(frozen=True)
class StratifiedPool(ProposalPool):
    first: Optional[ProbabilityModel] = None
    second: Optional[ProbabilityModel] = None

    def __post_init__(self):
        super().__post_init__()
        if self.first is None or self.second is None:
            raise ValueError("a stratified pool needs both half proposals")
        if self.n % 2:
            raise ValueError(f"a stratified pool needs an even size, got {self.n}")

    @classmethod
    def from_halves(cls, stream, n, first, second, trial=0, **kwargs) -> "StratifiedPool":
        return cls(stream, n, MixtureModel([first, second]), trial=trial, first=first, second=second, **kwargs)

    def points(self, lo, hi):
        half = self.n // 2
        ystream = self.stream.substream("Y")
        parts = []
        if lo < half:
            top = min(hi, half)
            parts.append(self.first.sample(ystream, lo, top - lo, self.trial))
        if hi > half:
            start = max(lo, half)
            parts.append(self.second.sample(ystream, start, hi - start, self.trial))
        return np.concatenate(parts) if len(parts) > 1 else parts[0]


def mis_select(pool: ProposalPool, target, x=None) -> Selection:
    """Exponential race with the mixture density as the importance denominator."""
    return select_index(pool, importance_log_weight(resolve_target(target, x), pool.proposal))


def sorted_exponentials(pool: ProposalPool) -> np.ndarray:
    """Order statistics of the pool's N exponentials from normalized spacings."""
    e = pool.exponentials(0, pool.n)
    return np.cumsum(e / np.arange(pool.n, 0, -1))


def orc_select(pool: ProposalPool, target, x=None, sorted_s=None) -> Selection:
    """Ordered random coding: sorted S_(i) paired with Y_i by position."""
    model = resolve_target(target, x)
    if sorted_s is None:
        sorted_s = sorted_exponentials(pool)
    lw = np.asarray(importance_log_weight(model, pool.proposal)(pool.points(0, pool.n)), dtype=np.float64)
    scores = np.log(sorted_s) - lw
    j = int(np.argmin(scores))
    if not np.isfinite(scores[j]):
        raise DegenerateWeightsError("degenerate weights: every sampled weight is zero")
    return Selection(index=j + 1, log_score=float(scores[j]), raw_exponential=float(sorted_s[j]), rank=j + 1)


@dataclass(frozen=True)
class MisRow:
    scheme: str
    N: int
    mean_dist: float
    var_dist: float
    rate_bits: float
    trials: int
    seed: int

    def to_row(self):
        return dataclasses.asdict(self)


def _draw_source(mix: GaussMix, stream, trial):
    return float(mix.source().sample(stream.substream("x"), 0, 1, trial)[0, 0])


def _paired_trial(mix: GaussMix, n, seed, trial):
    """CE-IS on a stratified pool and ORC on an i.i.d. mixture pool, sharing x and the S draws."""
    stream = RandomStream(seed)
    x = _draw_source(mix, stream, trial)
    target = mix.channel(x)
    first, second = mix.components()
    pool_stream = stream.substream("pool")
    strat = StratifiedPool.from_halves(pool_stream, n, first, second, trial=trial)
    sel = mis_select(strat, target)
    rank = rank_of(strat, sel)
    y_mis = float(strat.draw(sel.index)[1][0])
    iid = ProposalPool(pool_stream, n, mix.output(), trial=trial)
    orc = orc_select(iid, target)
    y_orc = float(iid.draw(orc.index)[1][0])
    return (y_mis - x) ** 2, rank, (y_orc - x) ** 2, orc.index


def mis_experiment(m, d, n_list, trials, seed=0, runner=None) -> List[MisRow]:
    """Distortion mean/variance and index-histogram rate for CE-IS (stratified) and ORC (i.i.d.)."""
    mix = GaussMix(m, d)
    rows = []
    for n in n_list:
        run = lambda trial: _paired_trial(mix, n, seed, trial)
        results = runner.map(run, range(trials)) if runner else [run(t) for t in range(trials)]
        dist_mis, ranks, dist_orc, indices = (np.asarray(col) for col in zip(*results))
        for scheme, dist, symbols in (("ce_is", dist_mis, ranks), ("orc", dist_orc, indices)):
            rows.append(MisRow(scheme, int(n), float(dist.mean()), float(dist.var()),
                               plugin_entropy_bits(symbols), int(trials), int(seed)))
        logger.info(f"[mis_experiment] m={m} N={n}: ce_is E={rows[-2].mean_dist:.3f} orc E={rows[-1].mean_dist:.3f}")
    return rows


def simulate_conditional(mix: GaussMix, x, scheme, pool_kind, n, trials, seed=0, runner=None) -> np.ndarray:
    """Outputs Y for a fixed source value x under one selector and pool layout."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}', expected one of {SCHEMES}")
    target = mix.channel(x)
    first, second = mix.components()
    stream = RandomStream(seed).substream(("conditional", pool_kind))

    def one(trial):
        if pool_kind == "stratified":
            pool = StratifiedPool.from_halves(stream, n, first, second, trial=trial)
        elif pool_kind == "iid":
            pool = ProposalPool(stream, n, mix.output(), trial=trial)
        else:
            raise ValueError(f"unknown pool kind '{pool_kind}'")
        sel = mis_select(pool, target) if scheme == "ce_is" else orc_select(pool, target)
        return float(pool.draw(sel.index)[1][0])

    values = runner.map(one, range(trials)) if runner else [one(t) for t in range(trials)]
    return np.asarray(values)


def goodness_of_fit(mix: GaussMix, x, scheme, pool_kind, n, trials, seed=0, bins=64, runner=None):
    """(chi2, p_value) of simulated outputs against N(x, D)."""
    samples = simulate_conditional(mix, x, scheme, pool_kind, n, trials, seed, runner)
    return chi_square_gof(samples, GaussianModel(x, mix.d), bins)
