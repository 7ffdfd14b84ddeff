"""
Paired exponential races over one shared pool and the matching-probability bounds.

Two targets p and q race on the same (S_i, Y_i); the evaluators here bound the
probability that the winners differ, given the winner of the p-race. Moments
are d_n(a||b) = E_a[(a/b)^(n-1)].
"""
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional

import numpy as np
from scipy import special

from core_sampling import (DegenerateWeightsError, DiscreteModel, GaussianModel, ProposalPool,
                           RandomStream, Selection, as_points, importance_log_weight, resolve_target)
from mc_stats import wilson_interval

logger = logging.getLogger(__name__)

MOMENT_ORDERS = (2, 3, 5)
_MC_BATCHES = 10


class PreconditionError(ValueError):
    """A bound was evaluated outside the region where it is defined."""


@dataclass(frozen=True)
class PairedSelection:
    u_p: int
    u_q: int
    selection_p: Optional[Selection] = None
    selection_q: Optional[Selection] = None

    @property
    def matched(self):
        return self.u_p == self.u_q


@dataclass(frozen=True)
class MatchStats:
    p_hat: float
    ci_lo: float
    ci_hi: float
    trials: int
    events: int

    @classmethod
    def from_counts(cls, events, trials):
        lo, hi = wilson_interval(events, trials)
        return cls(p_hat=events / trials if trials else float("nan"), ci_lo=lo, ci_hi=hi,
                   trials=int(trials), events=int(events))


@dataclass(frozen=True)
class MomentEstimate:
    order: int
    value: float
    std_err: float
    samples: int
    method: str
    flag: str = "ok"


@dataclass
class BoundReport:
    """One bound evaluation; serializes to a single CSV row."""
    variant: str
    n: int
    omega: float
    bound: float
    mu: float = float("nan")
    mu_limit: float = float("nan")
    lam: float = float("nan")
    beta: float = float("nan")
    d2: float = float("nan")
    d3: float = float("nan")
    d5: float = float("nan")
    epsilon: float = float("nan")
    p_hat: float = float("nan")
    ci_lo: float = float("nan")
    ci_hi: float = float("nan")
    flags: list = field(default_factory=list)
    orientation: str = "d_n(p_Y || p)"

    def with_empirical(self, stats: MatchStats) -> "BoundReport":
        self.p_hat, self.ci_lo, self.ci_hi = stats.p_hat, stats.ci_lo, stats.ci_hi
        return self

    def to_row(self):
        row = asdict(self)
        row["N"] = row.pop("n")
        row["flags"] = ";".join(self.flags)
        return row


# ---------------------------------------------------------------------------
# Paired selection
# ---------------------------------------------------------------------------

def paired_select_weights(pool: ProposalPool, log_weight_p, log_weight_q) -> PairedSelection:
    """Both races in a single pass over the pool."""
    best_p = (np.inf, -1, np.nan)
    best_q = (np.inf, -1, np.nan)
    for lo, hi in pool.chunks():
        log_s = np.log(pool.exponentials(lo, hi))
        points = pool.points(lo, hi)
        for which, lw_fn in (("p", log_weight_p), ("q", log_weight_q)):
            lw = np.asarray(lw_fn(points), dtype=np.float64).reshape(-1)
            if np.isnan(lw).any():
                raise ValueError("log_weight returned NaN")
            scores = log_s - lw
            j = int(np.argmin(scores))
            current = best_p if which == "p" else best_q
            if scores[j] < current[0]:
                update = (float(scores[j]), lo + j + 1, float(np.exp(log_s[j])))
                if which == "p":
                    best_p = update
                else:
                    best_q = update
    if best_p[1] < 0 or best_q[1] < 0:
        raise DegenerateWeightsError("degenerate weights in paired selection")
    sel_p = Selection(best_p[1], best_p[0], best_p[2])
    sel_q = Selection(best_q[1], best_q[0], best_q[2])
    return PairedSelection(sel_p.index, sel_q.index, sel_p, sel_q)


def paired_select(pool: ProposalPool, target_p, target_q, x=None) -> PairedSelection:
    lw_p = importance_log_weight(resolve_target(target_p, x), pool.proposal)
    lw_q = importance_log_weight(resolve_target(target_q, x), pool.proposal)
    return paired_select_weights(pool, lw_p, lw_q)


def conditional_paired_select(pool: ProposalPool, target_p, decoder_q) -> PairedSelection:
    """Encoder races on p(.|x), decoder on Q(.|z); z must not depend on the pool beyond Y_{U_p}."""
    return paired_select(pool, target_p, decoder_q)


def mismatch_mc(pool: ProposalPool, target_p, target_q, trials, runner=None) -> MatchStats:
    """Fraction of trials with U_p != U_q; trial t uses pool.with_trial(t)."""
    if trials < 100:
        raise ValueError(f"mismatch estimates need at least 100 trials, got {trials}")

    def one(t):
        return not paired_select(pool.with_trial(t), target_p, target_q).matched

    outcomes = runner.map(one, range(trials)) if runner else [one(t) for t in range(trials)]
    return MatchStats.from_counts(sum(outcomes), trials)


def mismatch_with_pool_bound(pool: ProposalPool, target_p, target_q, trials, runner=None):
    """Unconditional mismatch rate and the average pool-level bound at the p-winner.

    The average bound upper-bounds the unconditional mismatch probability.
    """
    if trials < 100:
        raise ValueError(f"mismatch estimates need at least 100 trials, got {trials}")
    lw_p = importance_log_weight(resolve_target(target_p), pool.proposal)
    lw_q = importance_log_weight(resolve_target(target_q), pool.proposal)

    def one(t):
        trial_pool = pool.with_trial(t)
        paired = paired_select_weights(trial_pool, lw_p, lw_q)
        points = trial_pool.points(0, trial_pool.n)
        return (not paired.matched), prop1_bound_from_log_weights(lw_p(points), lw_q(points), paired.u_p)

    outcomes = runner.map(one, range(trials)) if runner else [one(t) for t in range(trials)]
    mismatches = sum(int(m) for m, _ in outcomes)
    return MatchStats.from_counts(mismatches, trials), float(np.mean([b for _, b in outcomes]))


# ---------------------------------------------------------------------------
# Closed-form race oracle for finite pools
# ---------------------------------------------------------------------------

def _match_terms(w_p, w_q):
    a = np.asarray(w_p, dtype=np.float64)
    b = np.asarray(w_q, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("weight vectors must be 1-D and of equal length")
    terms = np.zeros(a.size)
    live = np.flatnonzero((a > 0) & (b > 0))
    for i in live:
        ratio = np.maximum(a / a[i], b / b[i])
        ratio[i] = 0.0
        terms[i] = 1.0 / (1.0 + ratio.sum())
    return terms


def exact_match_probability(w_p, w_q) -> float:
    """P(U_p = U_q) for fixed (unnormalized) weights racing on shared Exp(1) draws."""
    return float(_match_terms(w_p, w_q).sum())


def exact_conditional_mismatch(w_p, w_q, k) -> float:
    """P(U_q != k | U_p = k) for fixed weights; k is 1-based."""
    a = np.asarray(w_p, dtype=np.float64)
    if a[k - 1] <= 0:
        raise PreconditionError(f"index {k} has zero p-weight and cannot win the p-race")
    p_win = a[k - 1] / a.sum()
    return float(1.0 - _match_terms(w_p, w_q)[k - 1] / p_win)


# ---------------------------------------------------------------------------
# Divergences and moments
# ---------------------------------------------------------------------------

def _gaussian_log_power_integral(p: GaussianModel, q: GaussianModel, a):
    """log of integral p^a q^(1-a), or +inf where it diverges."""
    s = a * q.var + (1.0 - a) * p.var
    if np.any(s <= 0):
        return math.inf
    diff2 = (p.mean - q.mean) ** 2
    log_terms = ((1.0 - a) * np.log(p.std) + a * np.log(q.std) - 0.5 * np.log(s)
                 - a * (1.0 - a) * diff2 / (2.0 * s))
    return float(log_terms.sum())


def _paired_kind(p, q):
    if isinstance(p, GaussianModel) and isinstance(q, GaussianModel) and p.dim == q.dim:
        return "gaussian"
    if (isinstance(p, DiscreteModel) and isinstance(q, DiscreteModel)
            and np.array_equal(p.support, q.support)):
        return "discrete"
    return None


def d_moment(p, q, n, samples=1_000_000, stream: Optional[RandomStream] = None,
             analytic=True) -> MomentEstimate:
    """E_{Y~p}[(p(Y)/q(Y))^(n-1)]."""
    if n < 2:
        raise ValueError(f"moment order must be >= 2, got {n}")
    kind = _paired_kind(p, q) if analytic else None
    if kind == "gaussian":
        log_value = _gaussian_log_power_integral(p, q, n)
        if math.isinf(log_value):
            return MomentEstimate(n, math.inf, 0.0, 0, "analytic", flag="infinite")
        return MomentEstimate(n, math.exp(log_value), 0.0, 0, "analytic")
    if kind == "discrete":
        support = p.probs > 0
        if np.any(q.probs[support] == 0):
            return MomentEstimate(n, math.inf, 0.0, 0, "analytic", flag="infinite")
        value = float(np.sum(p.probs[support] ** n * q.probs[support] ** (1 - n)))
        return MomentEstimate(n, value, 0.0, 0, "analytic")
    return _d_moment_mc(p, q, n, samples, stream or RandomStream(0))


def _d_moment_mc(p, q, n, samples, stream):
    batch = max(1, samples // _MC_BATCHES)
    sums, total, peak = [], 0.0, 0.0
    for b in range(_MC_BATCHES):
        pts = p.sample(stream, b * batch, batch)
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = np.exp((n - 1) * (p.log_density(pts) - q.log_density(pts)))
        if not np.all(np.isfinite(ratio)):
            return MomentEstimate(n, math.inf, 0.0, (b + 1) * batch, "monte_carlo", flag="infinite")
        sums.append(ratio.mean())
        total += ratio.sum()
        peak = max(peak, float(ratio.max()))
    count = batch * _MC_BATCHES
    value = total / count
    std_err = float(np.std(sums, ddof=1) / math.sqrt(_MC_BATCHES))
    # a single draw carrying most of the mass means the running max has not settled
    if peak > 0.5 * total:
        logger.warning(f"[d_moment] order {n}: largest ratio holds {peak / total:.0%} of the sum; treating as infinite")
        return MomentEstimate(n, math.inf, std_err, count, "monte_carlo", flag="suspect_infinite")
    return MomentEstimate(n, float(value), std_err, count, "monte_carlo")


def kl_divergence_bits(p, q, samples=200_000, stream: Optional[RandomStream] = None) -> float:
    """D(p||q) in bits; closed form for Gaussian and discrete pairs."""
    kind = _paired_kind(p, q)
    if kind == "gaussian":
        nats = 0.5 * np.sum(np.log(q.var / p.var) + (p.var + (p.mean - q.mean) ** 2) / q.var - 1.0)
        return float(nats / math.log(2.0))
    if kind == "discrete":
        support = p.probs > 0
        if np.any(q.probs[support] == 0):
            return math.inf
        return float(np.sum(p.probs[support] * np.log2(p.probs[support] / q.probs[support])))
    pts = p.sample(stream or RandomStream(0), 0, samples)
    return float(np.mean(p.log_density(pts) - q.log_density(pts)) / math.log(2.0))


def gaussian_ratio_sup(target: GaussianModel, proposal: GaussianModel) -> float:
    """sup_y target(y)/proposal(y) for product Gaussians (inf unless target is narrower)."""
    if np.any(target.var >= proposal.var):
        same = np.allclose(target.var, proposal.var) and np.allclose(target.mean, proposal.mean)
        return 1.0 if same else math.inf
    diff2 = (target.mean - proposal.mean) ** 2
    log_sup = np.log(proposal.std / target.std) + diff2 / (2.0 * (proposal.var - target.var))
    return float(math.exp(log_sup.sum()))


def truncated_omega(target: GaussianModel, proposal: GaussianModel, mass=1.0 - 1e-9) -> float:
    """Ratio sup restricted to the central `mass` of a scalar proposal."""
    if target.dim != 1:
        raise ValueError("truncated_omega is defined for scalar models")
    tail = (1.0 - mass) / 2.0
    lo, hi = proposal.ppf(tail), proposal.ppf(1.0 - tail)
    grid = np.linspace(lo, hi, 20001)
    log_ratio = target.log_density(grid) - proposal.log_density(grid)
    return float(math.exp(log_ratio.max()))


def _moment_value(moments, order):
    value = moments.get(order)
    if isinstance(value, MomentEstimate):
        return value.value
    return float(value) if value is not None else math.nan


def proposal_moments(proposal, target, orders=MOMENT_ORDERS, **kwargs) -> Dict[int, MomentEstimate]:
    """d_n(p_Y || target) for the orders used by the finite-N constants."""
    return {n: d_moment(proposal, target, n, **kwargs) for n in orders}


# ---------------------------------------------------------------------------
# Bound evaluators
# ---------------------------------------------------------------------------

def _bound_from_log(log_term):
    """1 - (1 + e^log_term)^-1 evaluated stably."""
    return float(special.expit(log_term))


def prop1_bound_from_log_weights(log_w_p, log_w_q, k) -> float:
    """Conditional mismatch bound on a fixed pool given U_p = k (1-based)."""
    log_w_p = np.asarray(log_w_p, dtype=np.float64)
    log_w_q = np.asarray(log_w_q, dtype=np.float64)
    lp, lq = log_w_p[k - 1], log_w_q[k - 1]
    if np.isneginf(lq):
        return 1.0
    if np.isneginf(lp):
        return 0.0
    log_term = (lp - lq) + (special.logsumexp(log_w_q) - special.logsumexp(log_w_p))
    return _bound_from_log(log_term)


def prop1_bound(y_list, k, target_p, target_q, proposal) -> float:
    pts = as_points(y_list, proposal.dim)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"k={k} outside 1..{pts.shape[0]}")
    lw_p = importance_log_weight(target_p, proposal)(pts)
    lw_q = importance_log_weight(target_q, proposal)(pts)
    return prop1_bound_from_log_weights(lw_p, lw_q, k)


def mu_components(lam, beta, n, omega, d3, d5):
    """(mu, first term, K, L) of the finite-N matching constant."""
    if n < 2:
        raise PreconditionError("the finite-N constant needs N >= 2")
    nb = n - 1.0
    first = (beta / nb + 1.0) / (lam / nb + 1.0)
    if not (math.isfinite(d3) and math.isfinite(d5) and math.isfinite(omega)):
        return math.inf, first, math.inf, math.inf
    growth = 1.0 + (n + 1.0) * omega / nb
    inner = 2.0 + 4.0 * ((1.0 + beta / nb) / (1.0 + 2.0 * lam / nb)) ** 2 * (growth ** 2 + (omega - 1.0) / nb)
    k_term = 4.0 * (omega - 1.0) / (1.0 + lam / nb) ** 2 * growth * math.sqrt(inner)
    l_term = math.sqrt(omega - 1.0) * math.sqrt(max(d5 - d3 * d3, 0.0)) + (omega - 1.0) * d3
    mu = first + (1.0 + lam / nb) * k_term / nb + 2.0 * omega * (1.0 + lam / nb) * l_term / nb
    return mu, first, k_term, l_term


def _matching_bound(lam, beta, mu):
    if beta <= 0 or math.isinf(mu):
        return 1.0
    if lam <= 0:
        return 0.0
    return _bound_from_log(math.log(lam / beta) + math.log(mu))


def _ratios_at(y_k, target_p, target_q, proposal):
    pt = as_points(y_k, proposal.dim)
    lam = float(np.exp(importance_log_weight(target_p, proposal)(pt))[0])
    beta = float(np.exp(importance_log_weight(target_q, proposal)(pt))[0])
    return lam, beta


def thm2_mu_scalar(lam, beta, n, omega, d2=math.nan, d3=math.nan, d5=math.nan, variant="thm2") -> BoundReport:
    mu, first, _, _ = mu_components(lam, beta, n, omega, d3, d5)
    report = BoundReport(variant=variant, n=int(n), omega=float(omega), bound=_matching_bound(lam, beta, mu),
                         mu=mu, mu_limit=first, lam=lam, beta=beta, d2=d2, d3=d3, d5=d5)
    if math.isinf(mu):
        report.flags.append("moments_unavailable")
    return report


def thm2_mu(y_k, n, target_p, target_q, proposal, omega, moments=None) -> BoundReport:
    """Finite-N matching bound given Y_k = y_k won the p-race."""
    if moments is None:
        moments = proposal_moments(proposal, target_p)
    lam, beta = _ratios_at(y_k, target_p, target_q, proposal)
    return thm2_mu_scalar(lam, beta, n, omega, _moment_value(moments, 2),
                          _moment_value(moments, 3), _moment_value(moments, 5))


def alt_mu(lam, beta, n, eps, omega) -> float:
    if lam <= 0:
        raise PreconditionError("precondition violated: lambda(y_k) must be positive")
    if not 0 < eps < 1:
        raise PreconditionError(f"epsilon must lie in (0, 1), got {eps}")
    nb = n - 1.0
    concentration = (beta + nb * (1.0 + eps)) / (lam + nb * (1.0 - eps)) ** 2
    tail = (n * omega / lam ** 2) * 2.0 * math.exp(-nb * eps * eps / omega ** 2)
    return (nb + lam) * (concentration + tail)


def alt_thm2_scalar(lam, beta, n, eps, omega) -> BoundReport:
    mu = alt_mu(lam, beta, n, eps, omega)
    return BoundReport(variant="alt_thm2", n=int(n), omega=float(omega), bound=_matching_bound(lam, beta, mu),
                       mu=mu, mu_limit=1.0, lam=lam, beta=beta, epsilon=eps)


def alt_thm2_bound(y_k, n, eps, target_p, target_q, proposal, omega) -> BoundReport:
    lam, beta = _ratios_at(y_k, target_p, target_q, proposal)
    return alt_thm2_scalar(lam, beta, n, eps, omega)


def conditional_bounds(pool: ProposalPool, paired: PairedSelection, target_p, decoder_q, omega,
                       moments=None):
    """Both conditional bounds on a fixed pool: (pool-level form, finite-N form)."""
    points = pool.points(0, pool.n)
    lw_p = importance_log_weight(target_p, pool.proposal)(points)
    lw_q = importance_log_weight(decoder_q, pool.proposal)(points)
    pool_form = prop1_bound_from_log_weights(lw_p, lw_q, paired.u_p)
    finite_n = thm2_mu(points[paired.u_p - 1], pool.n, target_p, decoder_q, pool.proposal, omega, moments)
    finite_n.variant = "conditional_finite_n"
    return pool_form, finite_n


def conditional_mismatch_mc(pool: ProposalPool, target_p, target_q, y, trials, k=None, window=0.0,
                            max_attempts=None):
    """Mismatch rate conditioned on the p-race winner sitting at y.

    With k=None the winner's position is left free: pool draws are
    exchangeable, so conditioning on Y_{U_p} near y has the same law as
    conditioning on U_p = k and Y_k near y. With k set, pools are rejected
    until U_p = k exactly. Returns (MatchStats, mean pool-level bound).
    """
    target_y = as_points(y, pool.proposal.dim)[0]
    max_attempts = max_attempts or 1000 * trials
    lw_p = importance_log_weight(target_p, pool.proposal)
    lw_q = importance_log_weight(target_q, pool.proposal)
    accepted = mismatches = attempt = 0
    bound_sum = 0.0
    while accepted < trials and attempt < max_attempts:
        trial_pool = pool.with_trial(attempt)
        attempt += 1
        paired = paired_select_weights(trial_pool, lw_p, lw_q)
        if k is not None and paired.u_p != k:
            continue
        y_win = trial_pool.draw(paired.u_p)[1]
        if np.max(np.abs(y_win - target_y)) > window:
            continue
        accepted += 1
        mismatches += int(not paired.matched)
        points = trial_pool.points(0, trial_pool.n)
        bound_sum += prop1_bound_from_log_weights(lw_p(points), lw_q(points), paired.u_p)
    if accepted < trials:
        logger.warning(f"[conditional_mismatch_mc] accepted {accepted}/{trials} pools in {attempt} attempts")
    if accepted == 0:
        raise PreconditionError("no pool satisfied the conditioning event")
    return MatchStats.from_counts(mismatches, accepted), bound_sum / accepted
