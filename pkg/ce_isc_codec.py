"""
One-shot channel simulation by importance sampling with rank coding.

The encoder races the pool against the target, transmits the rank K of the
winning exponential among all S_i, and entropy codes K with a universal
integer code. The decoder inverts the rank on its own copy of the pool.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize, special

from core_sampling import (ProposalPool, RandomStream, Selection, importance_log_weight, index_of_rank,
                           kl_to_uniform_bits, rank_of, resolve_target, select_index)
from iml_bounds import d_moment, kl_divergence_bits
from mc_stats import (TvEstimate, bootstrap_tv, equal_probability_edges, mean_and_stderr,
                      plugin_entropy_bits, plugin_entropy_stderr)

logger = logging.getLogger(__name__)

LOG2E = math.log2(math.e)
# 1 + log2(e)/e, the rank-coding overhead constant
DELTA_BITS = 1.0 + LOG2E / math.e
T_MIN = 2.0 * LOG2E / math.e
CODER_KINDS = ("zipf", "elias_delta")
_ZIPF_DECODE_PREFIX = 64


class DecodeError(ValueError):
    """Raised for bit strings that are not a valid codeword sequence."""


def pack_bits(bits: str) -> bytes:
    """Big-endian packing; the last byte is zero padded."""
    if not bits:
        return b""
    padded = bits + "0" * (-len(bits) % 8)
    return int(padded, 2).to_bytes(len(padded) // 8, "big")


def unpack_bits(data: bytes, nbits: int) -> str:
    if nbits > 8 * len(data):
        raise DecodeError(f"{nbits} bits requested from {len(data)} bytes")
    if nbits == 0:
        return ""
    return format(int.from_bytes(data, "big"), f"0{8 * len(data)}b")[:nbits]


def _check_bits(bits):
    if not isinstance(bits, str) or any(c not in "01" for c in bits):
        raise DecodeError("bit strings may only contain '0' and '1'")


@dataclass(frozen=True)
class IndexCoder:
    kind: str = "elias_delta"
    zipf_exponent: Optional[float] = None

    def __post_init__(self):
        if self.kind not in CODER_KINDS:
            raise ValueError(f"unknown coder kind '{self.kind}', expected one of {CODER_KINDS}")
        if self.kind == "zipf":
            if self.zipf_exponent is None or not self.zipf_exponent > 1.0:
                raise ValueError(f"zipf exponent must be > 1, got {self.zipf_exponent}")

    @classmethod
    def for_rate(cls, rate_estimate_bits) -> "IndexCoder":
        """Zipf coder tuned to an a-priori rate estimate."""
        return cls("zipf", 1.0 + 1.0 / (rate_estimate_bits + DELTA_BITS))

    # -- Zipf / Shannon-Fano-Elias ---------------------------------------

    @property
    def _zeta(self):
        return float(special.zeta(self.zipf_exponent, 1.0))

    def _zipf_log2_prob(self, k):
        return -self.zipf_exponent * math.log2(k) - math.log2(self._zeta)

    def _zipf_tail(self, k):
        """P(K >= k)."""
        return float(special.zeta(self.zipf_exponent, float(k))) / self._zeta

    def _zipf_codeword(self, k):
        length = self.code_length(k)
        # F(k-1) + p(k)/2 = 1 - (P(K > k) + p(k)/2); work with the tail for precision
        s = self.zipf_exponent
        tail_half = (float(special.zeta(s, float(k + 1))) + 0.5 * float(k) ** (-s)) / self._zeta
        value = (1 << length) - math.ceil(math.ldexp(tail_half, length))
        return format(value, f"0{length}b")

    def _zipf_decode(self, bits):
        prefix = bits[:_ZIPF_DECODE_PREFIX]
        width = len(prefix)
        remainder = (1 << width) - int(prefix, 2)
        tail_target = math.ldexp(remainder, -width)
        hi = 1
        while self._zipf_tail(hi) >= tail_target:
            hi *= 2
            if hi > 1 << 62:
                raise DecodeError("bit string does not address a finite Zipf index")
        lo = max(1, hi // 2)
        # largest k with P(K >= k) >= target
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self._zipf_tail(mid) >= tail_target:
                lo = mid
            else:
                hi = mid
        for k in (lo, lo - 1, lo + 1):
            if k < 1:
                continue
            word = self._zipf_codeword(k)
            if bits.startswith(word):
                return k, len(word)
        raise DecodeError("no Zipf codeword matches the bit string")

    # -- public API -------------------------------------------------------

    def code_length(self, k) -> int:
        if k < 1:
            raise ValueError(f"index must be >= 1, got {k}")
        if self.kind == "elias_delta":
            n = int(k).bit_length()
            return (n - 1) + 2 * (n.bit_length() - 1) + 1
        return math.ceil(-self._zipf_log2_prob(k)) + 1

    def encode(self, k) -> str:
        if k < 1:
            raise ValueError(f"index must be >= 1, got {k}")
        if self.kind == "zipf":
            return self._zipf_codeword(k)
        k = int(k)
        n = k.bit_length()
        return "0" * (n.bit_length() - 1) + format(n, "b") + format(k, "b")[1:]

    def decode_prefix(self, bits) -> tuple:
        """(k, bits consumed) for the codeword at the front of `bits`."""
        _check_bits(bits)
        if not bits:
            raise DecodeError("empty bit string")
        if self.kind == "zipf":
            return self._zipf_decode(bits)
        zeros = len(bits) - len(bits.lstrip("0"))
        end_len = 2 * zeros + 1
        if end_len > len(bits):
            raise DecodeError("truncated Elias-delta length field")
        n = int(bits[zeros:end_len], 2)
        end = end_len + n - 1
        if end > len(bits):
            raise DecodeError("truncated Elias-delta payload")
        return int("1" + bits[end_len:end], 2), end

    def decode(self, bits) -> int:
        k, used = self.decode_prefix(bits)
        if used != len(bits):
            raise DecodeError(f"{len(bits) - used} trailing bits after the codeword")
        return k


def code_length(coder: IndexCoder, k) -> int:
    return coder.code_length(k)


class Encoding(NamedTuple):
    rank: int
    bits: str
    selection: Selection


class CeIscCodec:
    """Rank-coding channel simulator over a shared ProposalPool."""

    def __init__(self, coder: Optional[IndexCoder] = None):
        self.coder = coder or IndexCoder()
        self.logger = logging.getLogger(__name__)

    def encode(self, x, pool: ProposalPool, target) -> Encoding:
        model = resolve_target(target, x)
        sel = select_index(pool, importance_log_weight(model, pool.proposal))
        rank = rank_of(pool, sel)
        return Encoding(rank, self.coder.encode(rank), sel.with_rank(rank))

    def decode_index(self, bits, pool: ProposalPool) -> int:
        rank = self.coder.decode(bits)
        if rank > pool.n:
            raise DecodeError(f"decoded rank {rank} exceeds pool size {pool.n}")
        return index_of_rank(pool, rank)

    def decode(self, bits, pool: ProposalPool) -> np.ndarray:
        return pool.draw(self.decode_index(bits, pool))[1]


@dataclass(frozen=True)
class RateStats:
    mean_log2_k: float
    mean_log2_k_se: float
    entropy_k: float
    entropy_k_se: float
    mean_code_length: float
    mean_code_length_se: float
    trials: int

    @classmethod
    def from_ranks(cls, ranks, lengths) -> "RateStats":
        ranks = np.asarray(ranks)
        log_k, log_k_se = mean_and_stderr(np.log2(ranks))
        length, length_se = mean_and_stderr(lengths)
        return cls(log_k, log_k_se, plugin_entropy_bits(ranks), plugin_entropy_stderr(ranks),
                   length, length_se, int(ranks.size))


# ---------------------------------------------------------------------------
# Output-distribution diagnostics
# ---------------------------------------------------------------------------

def simulate_outputs(target, proposal, n, trials, seed=0, runner=None) -> np.ndarray:
    """Y_U over independent pools, one scalar per trial."""
    stream = RandomStream(seed).substream("proxy")
    pool = ProposalPool(stream, n, proposal)
    log_weight = importance_log_weight(target, proposal)

    def one(t):
        trial_pool = pool.with_trial(t)
        return float(trial_pool.draw(select_index(trial_pool, log_weight).index)[1][0])

    values = runner.map(one, range(trials)) if runner else [one(t) for t in range(trials)]
    return np.asarray(values)


def proxy_tv_estimate(target, proposal, n, trials, partition=None, seed=0, bootstrap=200,
                      runner=None) -> TvEstimate:
    """Histogram TV between simulated outputs and exact target samples."""
    if target.dim != 1:
        raise ValueError("proxy_tv_estimate works on scalar models")
    edges = equal_probability_edges(target, 128) if partition is None else np.asarray(partition)
    simulated = simulate_outputs(target, proposal, n, trials, seed, runner)
    reference = target.sample(RandomStream(seed).substream("reference"), 0, trials)[:, 0]
    return bootstrap_tv(simulated, reference, edges, resamples=bootstrap, seed=seed)


class N0Result(NamedTuple):
    n: int
    t: float
    log2_n: float
    residual: float


def _n0_excess(t, log2_omega):
    shift = t / 2.0 - LOG2E / math.e
    if log2_omega <= 0:
        gauss = 0.0 if shift > 0 else math.sqrt(2.0)
    else:
        gauss = math.sqrt(2.0) * math.exp(-shift * shift / (4.0 * log2_omega ** 2))
    return 2.0 ** (-t / 8.0) + gauss


def n0_bound(dkl_bits, omega, epsilon) -> N0Result:
    """Pool size N = 2^(D + t) whose proxy is within 4*epsilon in TV."""
    if omega < 1:
        raise ValueError(f"omega must be >= 1, got {omega}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    b = math.log2(omega)
    f = lambda t: _n0_excess(t, b) - epsilon
    if f(T_MIN) <= 0:
        t = T_MIN
    else:
        hi = 2.0 * T_MIN
        while f(hi) > 0:
            hi *= 2.0
        t = optimize.bisect(f, T_MIN, hi, xtol=1e-12)
    log2_n = dkl_bits + t
    return N0Result(n=int(math.ceil(2.0 ** log2_n)), t=t, log2_n=log2_n, residual=f(t))


# ---------------------------------------------------------------------------
# Rate bounds
# ---------------------------------------------------------------------------

@dataclass
class Theorem1Bounds:
    bnd1_bits: float
    bnd2_bits: Optional[float]
    alt_bits: Optional[float]
    mutual_info_bits: float
    delta: Optional[float]
    kl_uniform_bits: float
    omega: float
    epsilon: float
    flags: list = field(default_factory=list)

    @property
    def status(self):
        return "partial" if "moments_unavailable" in self.flags else "ok"


def delta_constant(omega, d2, d3) -> float:
    """Finite-N penalty of the mutual-information rate bound."""
    if not all(math.isfinite(v) for v in (omega, d2, d3)):
        return math.inf
    log_omega = math.log2(omega) if omega > 0 else 0.0
    alpha = (2.0 * (omega - 1.0) + 2.0 * math.sqrt(omega - 1.0) * math.sqrt(max(d3 - d2 * d2, 0.0))
             + 4.0 * omega * d2)
    return 6.0 * (omega - 1.0) * log_omega + alpha


def mi_rate_bound(mutual_info_bits, delta, n) -> float:
    inner = mutual_info_bits + delta / n
    return inner + math.log2(inner + 1.0) + 4.0


def alt_rate_bound(mutual_info_bits, n, epsilon, omega) -> Optional[float]:
    if n < 2 or not 0 < epsilon < 1:
        return None
    alpha = n / ((n - 1.0) * (1.0 - epsilon))
    beta = alpha * math.log2(alpha) + n * math.log2(n) * math.exp(-2.0 * (n - 1.0) * epsilon ** 2 / omega ** 2)
    inner = alpha * mutual_info_bits + beta
    return inner + math.log2(inner + 1.0) + 4.0


def theorem1_bounds(target, proposal, n, mc_samples=64, omega=1.0, epsilon=0.1, seed=0,
                    moments=None, mutual_info_bits=None) -> Theorem1Bounds:
    """Rate bounds for a fixed conditional target against a proposal.

    bnd1 averages D(lambda||u) over `mc_samples` independent pools; bnd2 and
    the alternative form use I = D(target||proposal) unless given.
    """
    pool = ProposalPool(RandomStream(seed).substream("rate_bounds"), n, proposal)
    log_weight = importance_log_weight(target, proposal)
    kl_uniform = float(np.mean([kl_to_uniform_bits(pool.with_trial(t), log_weight) for t in range(mc_samples)]))
    if mutual_info_bits is None:
        mutual_info_bits = kl_divergence_bits(target, proposal)
    flags = []
    if moments is None:
        moments = {order: d_moment(proposal, target, order).value for order in (2, 3)}
    d2 = getattr(moments.get(2), "value", moments.get(2))
    d3 = getattr(moments.get(3), "value", moments.get(3))
    delta = delta_constant(omega, float(d2), float(d3))
    bnd2 = None
    if math.isfinite(delta):
        bnd2 = mi_rate_bound(mutual_info_bits, delta, n)
    else:
        flags.append("moments_unavailable")
        logger.warning("[theorem1_bounds] d2/d3 moments are not finite; reporting bnd1 and the alternative bound only")
    return Theorem1Bounds(bnd1_bits=kl_uniform + DELTA_BITS, bnd2_bits=bnd2,
                          alt_bits=alt_rate_bound(mutual_info_bits, n, epsilon, omega),
                          mutual_info_bits=mutual_info_bits, delta=delta if math.isfinite(delta) else None,
                          kl_uniform_bits=kl_uniform, omega=omega, epsilon=epsilon, flags=flags)
