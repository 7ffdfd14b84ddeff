"""
Shared randomness and exponential-race index selection.

Every random quantity used by the encoder and the decoder is a pure function of
(seed, stream_id, trial, index). Draws come from numpy's counter-based Philox
generator: the key is (seed, stream_id), the high counter words carry the
trial index and the low words address the block holding the requested index,
so any index can be regenerated without touching its neighbours.
"""
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy import special, stats

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
DEFAULT_CHUNK_SIZE = 1 << 20
BIN_MODES = ("practical", "theoretical")

_WORDS_PER_BLOCK = 4
_UNIT = 2.0 ** -53
_RANK_HISTOGRAM_BINS = 4096

LogWeight = Callable[[np.ndarray], np.ndarray]
CandidateMask = Callable[[int, int], np.ndarray]


class DegenerateWeightsError(ValueError):
    """Raised when every sampled importance weight is zero."""

    def __init__(self, message, candidates_seen=None):
        super().__init__(message)
        self.candidates_seen = candidates_seen


# ---------------------------------------------------------------------------
# Counter-based random streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomStream:
    """A keyed family of uniform draws addressed by (trial, index)."""
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & MASK64)

    def substream(self, tag) -> "RandomStream":
        """Derives an independent stream; the same tag always yields the same stream."""
        label = f"{self.stream_id}/{tag}".encode("utf-8")
        digest = hashlib.blake2b(label, digest_size=8).digest()
        return RandomStream(self.seed, int.from_bytes(digest, "big"))

    def _bit_generator(self, trial, block):
        key = self.seed | (self.stream_id << 64)
        counter = ((int(trial) & MASK64) << 128) | int(block)
        return np.random.Philox(counter=counter, key=key)

    def raw(self, offset, count, trial=0) -> np.ndarray:
        """Raw 64-bit words for indices offset .. offset+count-1 (0-based)."""
        if offset < 0:
            raise ValueError(f"offset must be non-negative, got {offset}")
        if count <= 0:
            return np.empty(0, dtype=np.uint64)
        block, skip = divmod(int(offset), _WORDS_PER_BLOCK)
        words = self._bit_generator(trial, block).random_raw(skip + int(count))
        return np.asarray(words[skip:], dtype=np.uint64)

    def uniforms(self, offset, count, trial=0) -> np.ndarray:
        # 53-bit midpoint grid keeps every value strictly inside (0, 1)
        mantissa = (self.raw(offset, count, trial) >> np.uint64(11)).astype(np.float64)
        return (mantissa + 0.5) * _UNIT

    def exponentials(self, offset, count, trial=0) -> np.ndarray:
        return exponential_from_uniform(self.uniforms(offset, count, trial))

    def normals(self, offset, count, trial=0) -> np.ndarray:
        return special.ndtri(self.uniforms(offset, count, trial))


def exponential_from_uniform(u):
    """Inverse-CDF transform of Exp(1)."""
    return -np.log(u)


def exp_draw(stream: RandomStream, i: int, trial: int = 0) -> float:
    """The i-th (1-based) Exp(1) draw of a stream."""
    if i < 1:
        raise ValueError(f"index must be >= 1, got {i}")
    return float(stream.exponentials(i - 1, 1, trial)[0])


# ---------------------------------------------------------------------------
# Probability models
# ---------------------------------------------------------------------------

def as_points(points, dim) -> np.ndarray:
    """Coerces points to a (n, dim) float array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
    if arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {arr.shape}")
    return arr


class ProbabilityModel:
    """Density with an optional index-addressable sampler.

    Subclasses implement log_density over (n, dim) arrays and, when they can
    sample, sample(stream, offset, count, trial) returning (count, dim).
    """
    dim = 1

    def log_density(self, points) -> np.ndarray:
        raise NotImplementedError

    def sample(self, stream, offset, count, trial=0) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} is a density-only model")

    def density(self, points):
        return np.exp(self.log_density(points))


class GaussianModel(ProbabilityModel):
    """Product of independent scalar Gaussians."""

    def __init__(self, mean, var, dim=None):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64)).ravel()
        var = np.atleast_1d(np.asarray(var, dtype=np.float64)).ravel()
        self.dim = int(dim or max(mean.size, var.size))
        self.mean = np.broadcast_to(mean, (self.dim,)).copy()
        self.var = np.broadcast_to(var, (self.dim,)).copy()
        if np.any(self.var <= 0) or not np.all(np.isfinite(self.var)):
            raise ValueError(f"Gaussian variances must be positive and finite, got {self.var}")
        self.std = np.sqrt(self.var)

    def __repr__(self):
        return f"GaussianModel(mean={self.mean.tolist()}, var={self.var.tolist()})"

    def log_density(self, points):
        pts = as_points(points, self.dim)
        return stats.norm.logpdf(pts, loc=self.mean, scale=self.std).sum(axis=1)

    def sample(self, stream, offset, count, trial=0):
        cols = [stream.substream(j).normals(offset, count, trial) for j in range(self.dim)]
        return np.column_stack(cols) * self.std + self.mean

    def cdf(self, values):
        self._require_scalar()
        return stats.norm.cdf(values, loc=self.mean[0], scale=self.std[0])

    def ppf(self, q):
        self._require_scalar()
        return stats.norm.ppf(q, loc=self.mean[0], scale=self.std[0])

    def _require_scalar(self):
        if self.dim != 1:
            raise ValueError("cdf/ppf are only defined for scalar models")


class DiscreteModel(ProbabilityModel):
    """Finite alphabet; points are the support values."""

    def __init__(self, probs, support=None):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0 or np.any(probs < 0) or probs.sum() <= 0:
            raise ValueError(f"invalid probability vector: {probs}")
        self.probs = probs / probs.sum()
        if support is None:
            support = np.arange(probs.size, dtype=np.float64)
        self.support = np.asarray(support, dtype=np.float64)
        if self.support.shape != self.probs.shape:
            raise ValueError("support and probs must have the same length")
        if np.any(np.diff(self.support) <= 0):
            raise ValueError("support values must be strictly increasing")
        self.dim = 1
        self._cdf = np.cumsum(self.probs)
        with np.errstate(divide="ignore"):
            self._log_probs = np.log(self.probs)

    def __repr__(self):
        return f"DiscreteModel(probs={self.probs.tolist()})"

    def symbol_index(self, points):
        values = as_points(points, 1)[:, 0]
        idx = np.clip(np.searchsorted(self.support, values), 0, self.support.size - 1)
        return idx, self.support[idx] == values

    def log_density(self, points):
        idx, hit = self.symbol_index(points)
        return np.where(hit, self._log_probs[idx], -np.inf)

    def sample(self, stream, offset, count, trial=0):
        u = stream.uniforms(offset, count, trial)
        idx = np.minimum(np.searchsorted(self._cdf, u, side="right"), self.probs.size - 1)
        return self.support[idx].reshape(-1, 1)

    def cdf(self, values):
        values = np.asarray(values, dtype=np.float64)
        idx = np.searchsorted(self.support, values, side="right")
        padded = np.concatenate(([0.0], self._cdf))
        return padded[idx]


class MixtureModel(ProbabilityModel):
    """Finite mixture evaluated with log-sum-exp."""

    def __init__(self, components: Sequence[ProbabilityModel], weights=None):
        if not components:
            raise ValueError("a mixture needs at least one component")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError(f"mixture components disagree on dimension: {dims}")
        self.components = list(components)
        self.dim = dims.pop()
        if weights is None:
            weights = np.full(len(components), 1.0 / len(components))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(components),) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError(f"invalid mixture weights: {weights}")
        self.weights = weights / weights.sum()
        with np.errstate(divide="ignore"):
            self._log_weights = np.log(self.weights)
        self._cdf = np.cumsum(self.weights)

    def __repr__(self):
        return f"MixtureModel({self.components!r}, weights={self.weights.tolist()})"

    def component_log_densities(self, points):
        pts = as_points(points, self.dim)
        return np.stack([c.log_density(pts) for c in self.components])

    def log_density(self, points):
        terms = self.component_log_densities(points) + self._log_weights[:, None]
        return special.logsumexp(terms, axis=0)

    def sample(self, stream, offset, count, trial=0):
        u = stream.substream("component").uniforms(offset, count, trial)
        choice = np.minimum(np.searchsorted(self._cdf, u, side="right"), len(self.components) - 1)
        out = np.empty((count, self.dim))
        for c, component in enumerate(self.components):
            rows = choice == c
            if np.any(rows):
                values = component.sample(stream.substream(("value", c)), offset, count, trial)
                out[rows] = values[rows]
        return out

    def cdf(self, values):
        return sum(w * c.cdf(values) for w, c in zip(self.weights, self.components))


class ConditionalModel:
    """A family of models indexed by a conditioning value."""

    def __init__(self, factory: Callable[[np.ndarray], ProbabilityModel], dim=1):
        self.factory = factory
        self.dim = dim

    def given(self, value) -> ProbabilityModel:
        return self.factory(value)


def gaussian_channel(var, dim=1) -> ConditionalModel:
    """Additive Gaussian channel: given(x) = N(x, var)."""
    return ConditionalModel(lambda x: GaussianModel(x, var, dim=dim), dim=dim)


def resolve_target(target, x=None) -> ProbabilityModel:
    """Conditions a target on x when it is a ConditionalModel."""
    if isinstance(target, ConditionalModel):
        if x is None:
            raise ValueError("a conditional target needs a conditioning value")
        return target.given(x)
    return target


def importance_log_weight(target: ProbabilityModel, proposal: ProbabilityModel) -> LogWeight:
    """log p_target(y) - log p_proposal(y), with zero-target points mapped to -inf."""
    def log_weight(points):
        lt = target.log_density(points)
        with np.errstate(invalid="ignore"):
            lw = lt - proposal.log_density(points)
        return np.where(np.isneginf(lt), -np.inf, lw)
    return log_weight


# ---------------------------------------------------------------------------
# Pools and selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProposalPool:
    """Descriptor of the shared sequence (S_i, Y_i, l_i), i = 1..n.

    Nothing is stored: chunks are regenerated from the stream on every pass.
    `bins` is the bin-label alphabet size L; practical labels come from the
    index LSB, theoretical labels are i.i.d. uniform draws.
    """
    stream: RandomStream
    n: int
    proposal: ProbabilityModel
    bins: Optional[int] = None
    trial: int = 0
    bin_mode: str = "practical"
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"pool size must be >= 1, got {self.n}")
        if self.bins is not None and self.bins < 1:
            raise ValueError(f"bin count must be >= 1, got {self.bins}")
        if self.bin_mode not in BIN_MODES:
            raise ValueError(f"unknown bin mode '{self.bin_mode}', expected one of {BIN_MODES}")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")

    def with_trial(self, trial) -> "ProposalPool":
        return dataclasses.replace(self, trial=int(trial))

    def chunks(self) -> Iterator[tuple]:
        for lo in range(0, self.n, self.chunk_size):
            yield lo, min(lo + self.chunk_size, self.n)

    def exponentials(self, lo, hi) -> np.ndarray:
        return self.stream.substream("S").exponentials(lo, hi - lo, self.trial)

    def points(self, lo, hi) -> np.ndarray:
        return self.proposal.sample(self.stream.substream("Y"), lo, hi - lo, self.trial)

    def labels(self, lo, hi) -> np.ndarray:
        if self.bins is None:
            raise ValueError("pool has no bin labels")
        if self.bin_mode == "practical":
            return np.arange(lo, hi) % self.bins + 1
        u = self.stream.substream("l").uniforms(lo, hi - lo, self.trial)
        return np.minimum(np.floor(u * self.bins).astype(np.int64), self.bins - 1) + 1

    def draw(self, index):
        """(S_i, Y_i, l_i) for a 1-based index; l_i is None without bins."""
        if not 1 <= index <= self.n:
            raise IndexError(f"index {index} outside 1..{self.n}")
        lo = index - 1
        s = float(self.exponentials(lo, lo + 1)[0])
        y = self.points(lo, lo + 1)[0]
        label = int(self.labels(lo, lo + 1)[0]) if self.bins is not None else None
        return s, y, label


@dataclass(frozen=True)
class Selection:
    index: int
    log_score: float
    raw_exponential: float
    rank: Optional[int] = None

    @property
    def score(self):
        return math.exp(self.log_score)

    def with_rank(self, rank) -> "Selection":
        return dataclasses.replace(self, rank=int(rank))


def _chunk_log_weights(log_weight, points):
    lw = np.asarray(log_weight(points), dtype=np.float64).reshape(-1)
    if np.isnan(lw).any():
        raise ValueError("log_weight returned NaN")
    return lw


def select_index(pool: ProposalPool, log_weight: LogWeight,
                 candidates: Optional[CandidateMask] = None) -> Selection:
    """Exponential race: argmin_i ln S_i - log_weight(Y_i).

    `candidates(lo, hi)` may restrict the race to a boolean mask over the
    0-based chunk [lo, hi); excluded indices act as weight zero.
    """
    best = (np.inf, -1, np.nan)
    seen = 0
    for lo, hi in pool.chunks():
        s = pool.exponentials(lo, hi)
        lw = _chunk_log_weights(log_weight, pool.points(lo, hi))
        if candidates is not None:
            mask = np.asarray(candidates(lo, hi), dtype=bool)
            seen += int(np.count_nonzero(mask))
            lw = np.where(mask, lw, -np.inf)
        else:
            seen += hi - lo
        scores = np.log(s) - lw
        j = int(np.argmin(scores))
        if scores[j] < best[0]:
            best = (float(scores[j]), lo + j + 1, float(s[j]))
    if best[1] < 0:
        raise DegenerateWeightsError("degenerate weights: every sampled weight is zero", candidates_seen=seen)
    return Selection(index=best[1], log_score=best[0], raw_exponential=best[2])


def rank_of(pool: ProposalPool, sel: Selection) -> int:
    """Position of S_U among all S_i, ties broken toward the smaller index."""
    s_u = sel.raw_exponential
    rank = 1
    for lo, hi in pool.chunks():
        s = pool.exponentials(lo, hi)
        rank += int(np.count_nonzero(s < s_u))
        ties = np.flatnonzero(s == s_u) + lo + 1
        rank += int(np.count_nonzero(ties < sel.index))
    return rank


def index_of_rank(pool: ProposalPool, rank: int) -> int:
    """Inverse of rank_of: the 1-based index whose S has the given rank."""
    if not 1 <= rank <= pool.n:
        raise ValueError(f"rank {rank} outside 1..{pool.n}")
    if pool.n <= pool.chunk_size:
        s = pool.exponentials(0, pool.n)
        return int(np.argsort(s, kind="stable")[rank - 1]) + 1

    # Two streaming passes: histogram on Exp(1) quantiles, then sort one bin.
    edges = -np.log1p(-np.linspace(0.0, 1.0, _RANK_HISTOGRAM_BINS + 1)[1:-1])
    counts = np.zeros(_RANK_HISTOGRAM_BINS, dtype=np.int64)
    for lo, hi in pool.chunks():
        counts += np.bincount(np.searchsorted(edges, pool.exponentials(lo, hi), side="right"),
                              minlength=_RANK_HISTOGRAM_BINS)
    cumulative = np.cumsum(counts)
    target_bin = int(np.searchsorted(cumulative, rank))
    before = int(cumulative[target_bin - 1]) if target_bin > 0 else 0
    values, indices = [], []
    for lo, hi in pool.chunks():
        s = pool.exponentials(lo, hi)
        hit = np.flatnonzero(np.searchsorted(edges, s, side="right") == target_bin)
        values.append(s[hit])
        indices.append(hit + lo + 1)
    values = np.concatenate(values)
    indices = np.concatenate(indices)
    order = np.lexsort((indices, values))
    return int(indices[order[rank - before - 1]])


def normalized_weights(pool: ProposalPool, target, x=None) -> np.ndarray:
    """Self-normalized importance weights lambda_i over the whole pool."""
    model = resolve_target(target, x)
    lw = _chunk_log_weights(importance_log_weight(model, pool.proposal), pool.points(0, pool.n))
    total = special.logsumexp(lw)
    if not np.isfinite(total):
        raise DegenerateWeightsError("degenerate weights: every sampled weight is zero")
    return np.exp(lw - total)


def kl_to_uniform_bits(pool: ProposalPool, log_weight: LogWeight) -> float:
    """D(lambda || uniform) in bits, accumulated chunk by chunk."""
    lse, acc = -np.inf, 0.0
    for lo, hi in pool.chunks():
        lw = _chunk_log_weights(log_weight, pool.points(lo, hi))
        chunk_lse = special.logsumexp(lw)
        if not np.isfinite(chunk_lse):
            continue
        finite = np.isfinite(lw)
        chunk_acc = float(np.sum(np.exp(lw[finite] - chunk_lse) * lw[finite]))
        merged = np.logaddexp(lse, chunk_lse)
        acc = acc * math.exp(lse - merged) + chunk_acc * math.exp(chunk_lse - merged)
        lse = merged
    if not np.isfinite(lse):
        raise DegenerateWeightsError("degenerate weights: every sampled weight is zero")
    return (acc - lse + math.log(pool.n)) / math.log(2.0)
