"""
Lossy compression with side information at the decoder.

The encoder races the shared pool against p_{W|V}(.|v) and sends only the bin
label of the winner. The decoder races the same pool, restricted to that bin,
against p_{W|T}(.|t). With decision feedback the decoder returns (an image of)
the MSB of its index and the encoder either acknowledges or retransmits.

Index split on (U-1): LSB = (U-1) mod L is the bin label minus one, MSB =
(U-1) // L ranges over N/L values.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy import special

from core_sampling import (MASK64, ConditionalModel, DegenerateWeightsError, ProbabilityModel, ProposalPool,
                           RandomStream, Selection, importance_log_weight, select_index)
from iml_bounds import MatchStats
from models_gaussian import GaussianWZ

logger = logging.getLogger(__name__)

FEEDBACK_MODES = ("none", "full", "partial", "hashed")
LN2 = math.log(2.0)


class EmptyBinError(ValueError):
    """No pool index carries the requested bin label."""


class FeedbackConfigError(ValueError):
    """The feedback configuration violates one of its invariants."""


def squared_error(v, v_hat) -> float:
    return float(np.mean((np.asarray(v, dtype=np.float64) - np.asarray(v_hat, dtype=np.float64)) ** 2))


@dataclass(frozen=True)
class SideInfoProblem:
    """Models and rules of one side-information coding problem.

    The decoder weight is log(p_{W|T}/p_W); it comes from `decoder_log_ratio`
    when supplied, otherwise from the analytic `posterior`.
    """
    source: ProbabilityModel
    target: ConditionalModel
    marginal: ProbabilityModel
    side_channel: Optional[ConditionalModel] = None
    posterior: Optional[ConditionalModel] = None
    decoder_log_ratio: Optional[Callable] = None
    distortion: Callable = squared_error
    reconstruction: Optional[Callable] = None
    side_estimate: Optional[Callable] = None
    info_density: Optional[Callable] = None
    joint_sampler: Optional[Callable] = None
    k: int = 1

    @classmethod
    def from_gaussian(cls, model: GaussianWZ) -> "SideInfoProblem":
        side = ConditionalModel(model.side_channel, dim=model.k) if model.var_t_given_v > 0 else None

        def joint(stream, count):
            v = model.source().sample(stream.substream("V"), 0, count)
            t = v + model_noise(stream.substream("T"), count, model.k, model.var_t_given_v)
            w = v + model_noise(stream.substream("W"), count, model.k, model.var_w_given_v)
            return v, w, t

        return cls(source=model.source(), target=ConditionalModel(model.target, dim=model.k),
                   marginal=model.marginal_w(), side_channel=side,
                   posterior=ConditionalModel(model.posterior_w_given_t, dim=model.k),
                   reconstruction=model.ivw_fuse, side_estimate=model.side_info_estimate,
                   info_density=model.info_density, joint_sampler=joint, k=model.k)

    def sample_joint(self, stream: RandomStream, trial):
        """(v, t) for one trial."""
        v = self.source.sample(stream.substream("V"), 0, 1, trial)[0]
        if self.side_channel is None:
            return v, v.copy()
        t = self.side_channel.given(v).sample(stream.substream("T"), 0, 1, trial)[0]
        return v, t

    def sample_joint_batch(self, stream: RandomStream, count):
        """(V, W, T) arrays of shape (count, k)."""
        if self.joint_sampler is not None:
            return self.joint_sampler(stream, count)
        rows = []
        for trial in range(count):
            v, t = self.sample_joint(stream, trial)
            w = self.target.given(v).sample(stream.substream("W"), 0, 1, trial)[0]
            rows.append((v, w, t))
        v, w, t = (np.stack(col) for col in zip(*rows))
        return v, w, t

    def encoder_log_weight(self, v):
        return importance_log_weight(self.target.given(v), self.marginal)

    def decoder_log_weight(self, t):
        if self.decoder_log_ratio is not None:
            return self.decoder_log_ratio(t)
        if self.posterior is None:
            raise ValueError("problem has neither a posterior model nor a decoder log-ratio")
        return importance_log_weight(self.posterior.given(t), self.marginal)

    def info_density_bits(self, w, v, t) -> np.ndarray:
        if self.info_density is not None:
            return np.asarray(self.info_density(w, v, t), dtype=np.float64)
        if self.posterior is None:
            raise ValueError("the information density needs an analytic posterior")
        values = [(self.target.given(vi).log_density(wi) - self.posterior.given(ti).log_density(wi))[0] / LN2
                  for wi, vi, ti in zip(w, v, t)]
        return np.asarray(values)

    def reconstruct(self, w, t):
        return self.reconstruction(w, t) if self.reconstruction is not None else np.asarray(w)


def model_noise(stream, count, k, var):
    if var == 0:
        return np.zeros((count, k))
    cols = [stream.substream(j).normals(0, count) for j in range(k)]
    return np.column_stack(cols) * math.sqrt(var)


# ---------------------------------------------------------------------------
# Feedback configuration and transcripts
# ---------------------------------------------------------------------------

def _is_power_of_two(value):
    return value >= 1 and value & (value - 1) == 0


@dataclass(frozen=True)
class FeedbackConfig:
    """Protocol parameters.

    `l2` is the number of MSB classes used by partial retransmission: on a
    failed first round the encoder sends which of l2 contiguous MSB ranges
    holds its index (log2 l2 bits), and the decoder re-races that class
    inside the bin without its rejected pick. `h` is the hashed-feedback width.
    """
    n: int
    bins: int
    mode: str = "full"
    l2: Optional[int] = None
    h: Optional[int] = None
    hash_seed: int = 0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise FeedbackConfigError("; ".join(problems))

    def violations(self) -> List[str]:
        problems = []
        if self.mode not in FEEDBACK_MODES:
            problems.append(f"mode '{self.mode}' is not one of {FEEDBACK_MODES}")
        if not _is_power_of_two(self.bins):
            problems.append(f"L={self.bins} must be a power of two")
        if self.bins > self.n:
            problems.append(f"L={self.bins} exceeds N={self.n}")
        elif self.n % self.bins:
            problems.append(f"N={self.n} is not a multiple of L={self.bins}")
        msb_size = max(self.n // max(self.bins, 1), 1)
        if self.mode == "partial" and self.l2 is None:
            problems.append("partial mode needs L2")
        if self.l2 is not None and not 2 <= self.l2 <= msb_size:
            problems.append(f"L2={self.l2} must lie in 2..N/L={msb_size}")
        if self.mode == "hashed" and (self.h is None or not 1 <= self.h <= 64):
            problems.append(f"hashed mode needs 1 <= h <= 64, got {self.h}")
        return problems

    @property
    def msb_size(self):
        return self.n // self.bins

    @property
    def lsb_bits(self):
        return math.log2(self.bins)

    @property
    def msb_bits(self):
        return math.log2(self.msb_size)

    @property
    def retransmit_bits(self):
        return math.log2(self.l2) if self.l2 is not None else self.msb_bits

    def msb_class(self, msb):
        return msb * self.l2 // self.msb_size


@dataclass
class Transcript:
    forward_bits: float
    feedback_bits: float
    first_round_matched: bool
    undetected_error: bool
    u_p: int
    u_q: int
    u_final: int
    retransmitted: bool
    nack_bits: int
    w_out: np.ndarray = field(repr=False)
    v_hat: np.ndarray = field(repr=False)
    distortion: float = float("nan")
    distortion_side: float = float("nan")

    def to_json(self):
        record = asdict(self)
        for key in ("w_out", "v_hat"):
            record[key] = np.asarray(record[key]).tolist()
        return json.dumps(record, sort_keys=True)


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SideInfoMessage:
    u_p: int
    label: Optional[int]
    bits: float
    selection: Selection


def encode_side_info(v, pool: ProposalPool, problem: SideInfoProblem) -> SideInfoMessage:
    sel = select_index(pool, problem.encoder_log_weight(v))
    if pool.bins is None or pool.bins == 1:
        return SideInfoMessage(sel.index, 1 if pool.bins else None, 0.0, sel)
    label = pool.draw(sel.index)[2]
    return SideInfoMessage(sel.index, label, math.log2(pool.bins), sel)


def decode_side_info(t, label, pool: ProposalPool, problem: SideInfoProblem, restrict=None) -> int:
    """Race on the decoder posterior over indices carrying `label`.

    `restrict(lo, hi)` may narrow the candidates further (boolean mask over
    the 0-based chunk).
    """
    if label is None and restrict is None:
        candidates = None
    else:
        def candidates(lo, hi):
            mask = np.ones(hi - lo, dtype=bool) if label is None else pool.labels(lo, hi) == label
            if restrict is not None:
                mask &= restrict(lo, hi)
            return mask
    try:
        return select_index(pool, problem.decoder_log_weight(t), candidates).index
    except DegenerateWeightsError as exc:
        if exc.candidates_seen == 0:
            raise EmptyBinError(f"no pool index carries bin label {label}") from exc
        raise


def hash_key(hash_seed, trial):
    words = RandomStream(hash_seed).substream("hash").raw(0, 2, trial)
    return int(words[0]) | 1, int(words[1])


def universal_hash(value, h, key) -> int:
    """Multiply-add-shift hash of a non-negative integer to h bits."""
    a, b = key
    return ((a * int(value) + b) & MASK64) >> (64 - h)


def run_feedback_round(v, t, pool: ProposalPool, fb: FeedbackConfig, problem: SideInfoProblem) -> Transcript:
    """One three-step exchange; feedback bits are tracked but not counted as rate."""
    if pool.bins != fb.bins or pool.bin_mode != "practical" or pool.n != fb.n:
        raise FeedbackConfigError("feedback needs a practical-mode pool with matching N and L")
    bins = fb.bins
    message = encode_side_info(v, pool, problem)
    u_p = message.u_p
    lsb, msb_p = (u_p - 1) % bins, (u_p - 1) // bins
    u_q = decode_side_info(t, lsb + 1, pool, problem)
    msb_q = (u_q - 1) // bins

    forward = fb.lsb_bits
    feedback_bits = 0.0
    u_final = u_q
    retransmitted = False
    if fb.mode != "none":
        if fb.mode == "hashed":
            key = hash_key(fb.hash_seed, pool.trial)
            feedback_bits = float(fb.h)
            images_match = universal_hash(msb_q, fb.h, key) == universal_hash(msb_p, fb.h, key)
        else:
            feedback_bits = fb.msb_bits
            images_match = msb_q == msb_p
        if images_match:
            forward += 1.0
        else:
            retransmitted = True
            forward += fb.retransmit_bits
            u_final = _retransmit(t, lsb, msb_p, u_q, pool, fb, problem)

    w_out = pool.draw(u_final)[1]
    v_hat = problem.reconstruct(w_out, t)
    side = problem.side_estimate(t) if problem.side_estimate is not None else v_hat
    return Transcript(forward_bits=forward, feedback_bits=feedback_bits, first_round_matched=u_p == u_q,
                      undetected_error=fb.mode in ("partial", "hashed") and u_final != u_p,
                      u_p=u_p, u_q=u_q, u_final=u_final, retransmitted=retransmitted,
                      nack_bits=int(retransmitted), w_out=w_out, v_hat=np.asarray(v_hat),
                      distortion=problem.distortion(v, v_hat), distortion_side=problem.distortion(v, side))


def _retransmit(t, lsb, msb_p, u_q, pool, fb, problem):
    if fb.l2 is None:
        return msb_p * fb.bins + lsb + 1
    cls = fb.msb_class(msb_p)

    # the nack rules out u_q, so it leaves the re-decode race
    def same_class(lo, hi):
        idx = np.arange(lo, hi)
        return (idx // fb.bins * fb.l2 // fb.msb_size == cls) & (idx != u_q - 1)

    return decode_side_info(t, lsb + 1, pool, problem, restrict=same_class)


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

def _mismatch_terms(info_bits, bins, eps):
    return special.expit(math.log1p(eps) - math.log(bins) + np.asarray(info_bits) * LN2)


def prop4_bound(problem: SideInfoProblem, bins, eps=0.1, mc_trials=10_000, seed=0) -> float:
    """Average of 1 - (1 + (1+eps) 2^i / L)^-1 over joint draws; i sums over coordinates."""
    v, w, t = problem.sample_joint_batch(RandomStream(seed).substream("prop4"), mc_trials)
    return float(np.mean(_mismatch_terms(problem.info_density_bits(w, v, t), bins, eps)))


def excess_distortion_bound(problem: SideInfoProblem, d_max, bins, eps=0.1, mc_trials=10_000, seed=0) -> float:
    """Probability-of-excess-distortion bound; equals prop4_bound when d_max is infinite."""
    v, w, t = problem.sample_joint_batch(RandomStream(seed).substream("prop4"), mc_trials)
    terms = _mismatch_terms(problem.info_density_bits(w, v, t), bins, eps)
    within = np.array([problem.distortion(vi, problem.reconstruct(wi, ti)) <= d_max
                       for vi, wi, ti in zip(v, w, t)])
    return float(np.mean(np.where(within, terms, 1.0)))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RdGridPoint:
    k: int
    n: int
    bins: int
    mode: str
    sigma2_wv: float
    l2: Optional[int] = None
    h: Optional[int] = None

    @property
    def l2_or_h(self):
        return self.h if self.mode == "hashed" else self.l2

    def feedback(self, hash_seed=0) -> FeedbackConfig:
        return FeedbackConfig(self.n, self.bins, self.mode, self.l2, self.h, hash_seed)


@dataclass
class RdPoint:
    k: int
    N: int
    L: int
    mode: str
    L2_or_h: Optional[int]
    sigma2_wv: float
    rate_bits_per_sample: float
    distortion_db: float
    mse: float
    p_mismatch: float
    undetected_err_rate: float
    trials: int
    seed: int
    mse_side_only: float
    closed_form_rate: float
    nack_bits_per_sample: float

    def to_row(self):
        return asdict(self)


def gaussian_problem(point: RdGridPoint, var_v=1.0, var_t_given_v=0.01) -> SideInfoProblem:
    return SideInfoProblem.from_gaussian(GaussianWZ(var_v, var_t_given_v, point.sigma2_wv, point.k))


def _round_for_trial(problem, point, seed, trial, bin_mode="practical"):
    stream = RandomStream(seed)
    v, t = problem.sample_joint(stream.substream("source"), trial)
    pool = ProposalPool(stream.substream("pool"), point.n, problem.marginal, bins=point.bins,
                        trial=trial, bin_mode=bin_mode)
    return run_feedback_round(v, t, pool, point.feedback(hash_seed=seed), problem)


def closed_form_rate(fb: FeedbackConfig, p_retransmit) -> float:
    if fb.mode == "none":
        return fb.lsb_bits
    return fb.lsb_bits + 1.0 + (fb.retransmit_bits - 1.0) * p_retransmit


def summarize_round(point: RdGridPoint, transcripts, seed) -> RdPoint:
    fb = point.feedback(hash_seed=seed)
    trials = len(transcripts)
    forward = np.mean([tr.forward_bits for tr in transcripts])
    mse = float(np.mean([tr.distortion for tr in transcripts]))
    mse_side = float(np.mean([tr.distortion_side for tr in transcripts]))
    if point.mode == "none" and mse > mse_side:
        mse = mse_side
    p_retx = float(np.mean([tr.retransmitted for tr in transcripts]))
    return RdPoint(k=point.k, N=point.n, L=point.bins, mode=point.mode, L2_or_h=point.l2_or_h,
                   sigma2_wv=point.sigma2_wv, rate_bits_per_sample=float(forward) / point.k,
                   distortion_db=10.0 * math.log10(mse) if mse > 0 else -math.inf, mse=mse,
                   p_mismatch=float(np.mean([not tr.first_round_matched for tr in transcripts])),
                   undetected_err_rate=float(np.mean([tr.undetected_error for tr in transcripts])),
                   trials=trials, seed=seed, mse_side_only=mse_side,
                   closed_form_rate=closed_form_rate(fb, p_retx) / point.k,
                   nack_bits_per_sample=float(np.mean([tr.nack_bits for tr in transcripts])) / point.k)


def rd_experiment(grid, trials, seed=0, problem_factory=gaussian_problem, runner=None,
                  transcript_sink=None) -> List[RdPoint]:
    """Rate and distortion of the feedback protocol at each grid point.

    Trials share (v, t, pool) across grid points through the seed, so grid
    points are paired comparisons.
    """
    if not grid:
        raise ValueError("rd_experiment needs a nonempty grid")
    points = []
    for point in grid:
        problem = problem_factory(point)
        run = lambda trial: _round_for_trial(problem, point, seed, trial)
        transcripts = runner.map(run, range(trials)) if runner else [run(i) for i in range(trials)]
        if transcript_sink is not None:
            transcript_sink.extend(transcripts)
        summary = summarize_round(point, transcripts, seed)
        logger.info(f"[rd_experiment] k={point.k} N={point.n} L={point.bins} mode={point.mode} "
                    f"-> rate={summary.rate_bits_per_sample:.3f} dist={summary.distortion_db:.2f} dB")
        points.append(summary)
    return points


def matching_probability(problem: SideInfoProblem, n, bins, trials, seed=0, runner=None,
                         bin_mode="practical") -> MatchStats:
    """First-round P(U_p = U_q) without feedback."""
    stream = RandomStream(seed)

    def one(trial):
        v, t = problem.sample_joint(stream.substream("source"), trial)
        pool = ProposalPool(stream.substream("pool"), n, problem.marginal, bins=bins, trial=trial,
                            bin_mode=bin_mode)
        message = encode_side_info(v, pool, problem)
        u_q = decode_side_info(t, message.label, pool, problem)
        if message.label is not None and pool.draw(u_q)[2] != message.label:
            raise AssertionError("decoder returned an index outside the received bin")
        return u_q == message.u_p

    outcomes = runner.map(one, range(trials)) if runner else [one(i) for i in range(trials)]
    return MatchStats.from_counts(sum(outcomes), trials)


def feedback_error_rate(problem: SideInfoProblem, point: RdGridPoint, trials, seed=0, runner=None):
    """(first-round mismatch stats, undetected-error stats) for one protocol configuration."""
    run = lambda trial: _round_for_trial(problem, point, seed, trial)
    transcripts = runner.map(run, range(trials)) if runner else [run(i) for i in range(trials)]
    mismatches = sum(not tr.first_round_matched for tr in transcripts)
    undetected = sum(tr.undetected_error for tr in transcripts)
    return MatchStats.from_counts(mismatches, trials), MatchStats.from_counts(undetected, trials)
