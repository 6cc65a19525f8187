"""
Random binary matrices of the adaptation dynamics.

Draws come from a counter-based Philox stream keyed by (master seed, trial)
with the time step and purpose encoded in the counter. Any draw can be
replayed from its key alone, so trials run in any order or process and
still reproduce bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from adapt_core import StochasticMatrix, StochasticVector
from adapt_errors import DimensionError, ParamOutOfRange

_WORD = 64
_MASK64 = (1 << _WORD) - 1


class Channel(IntEnum):
    """Purpose of a draw; keeps the streams of one (trial, time) disjoint."""
    ADAPTATION = 0
    SUSCEPTIBILITY = 1
    MUTATION = 2
    WALK = 3
    WALK_START = 4
    GENERATOR = 5
    GENERATOR_BLOCK_A = 6
    GENERATOR_BLOCK_B = 7
    GENERATOR_CROSS = 8
    SUSCEPTIBILITY_PARAMS = 9


@dataclass(frozen=True)
class RngStream:
    """
    Key of one counter-based stream.

    The Philox key is (master_seed, trial); the counter holds the row offset
    in its low word, the time step in the next and the channel above that.
    Row i of a per-row draw reads position i of the stream.
    """
    master_seed: int
    trial: int = 0
    time: int = 0
    channel: Channel = Channel.ADAPTATION

    def __post_init__(self):
        for name in ("master_seed", "trial", "time"):
            value = getattr(self, name)
            if not 0 <= value <= _MASK64:
                raise ParamOutOfRange(f"{name}={value} must fit in 64 unsigned bits")

    def at(self, time: int, channel: Channel | None = None) -> "RngStream":
        return replace(self, time=time, channel=self.channel if channel is None else channel)

    def for_trial(self, trial: int) -> "RngStream":
        return replace(self, trial=trial)

    def generator(self) -> np.random.Generator:
        key = (self.master_seed & _MASK64) | ((self.trial & _MASK64) << _WORD)
        counter = (self.time << _WORD) | (int(self.channel) << (2 * _WORD))
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def uniforms(self, count: int) -> np.ndarray:
        return self.generator().random(count)


@dataclass(frozen=True)
class SelectionMatrix:
    """Binary one-hot-row stochastic matrix stored as select[i] = source of row i."""
    select: np.ndarray

    def __post_init__(self):
        select = np.asarray(self.select, dtype=np.int64)
        if select.ndim != 1 or select.size == 0:
            raise DimensionError(f"Selection must be a non-empty index vector, got shape {select.shape}")
        if np.any(select < 0) or np.any(select >= select.size):
            raise DimensionError(f"Selection indices must lie in [0, {select.size}), got {select.tolist()}")
        select.setflags(write=False)
        object.__setattr__(self, "select", select)

    @property
    def n(self) -> int:
        return self.select.size

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n))
        dense[np.arange(self.n), self.select] = 1.0
        return dense

    @classmethod
    def identity(cls, n: int) -> "SelectionMatrix":
        return cls(np.arange(n))


@dataclass(frozen=True)
class SusceptibilityDraw:
    """Diagonal of Lambda(t): lam[i] = 1 means agent i adapts socially."""
    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.int8)
        if lam.ndim != 1 or np.any((lam != 0) & (lam != 1)):
            raise DimensionError(f"Susceptibility draw must be a 0/1 vector, got {self.lam!r}")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def n(self) -> int:
        return self.lam.size


def cumulative_rows(Q: StochasticMatrix | np.ndarray) -> np.ndarray:
    """Row CDFs with every last entry exactly 1 so inverse-CDF walks stay in range."""
    cdf = np.cumsum(np.asarray(Q, dtype=np.float64), axis=-1)
    return cdf / cdf[..., -1:]


def inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index of the first CDF entry exceeding u, row by row."""
    return np.count_nonzero(cdf <= u[..., None], axis=-1)


def sample_adaptation(Q: StochasticMatrix, stream: RngStream) -> SelectionMatrix:
    """Row i copies agent j with probability q_ij; one uniform per row."""
    u = stream.at(stream.time, Channel.ADAPTATION).uniforms(Q.n)
    return SelectionMatrix(inverse_cdf(cumulative_rows(Q), u))


def sample_susceptibility(gamma, stream: RngStream) -> SusceptibilityDraw:
    """Independent Bernoulli(gamma_i) per agent."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 1 or np.any(gamma < 0) or np.any(gamma > 1):
        raise ParamOutOfRange(f"Susceptibilities must be a vector in [0,1], got {gamma.tolist()}")
    u = stream.at(stream.time, Channel.SUSCEPTIBILITY).uniforms(gamma.size)
    return SusceptibilityDraw((u < gamma).astype(np.int8))


def sample_mutation(q: StochasticVector, n: int, stream: RngStream) -> SelectionMatrix:
    """Every row independently picks a prejudice index from q."""
    if q.n != n:
        raise DimensionError(f"Mutation distribution has {q.n} entries, need {n}")
    u = stream.at(stream.time, Channel.MUTATION).uniforms(n)
    return SelectionMatrix(inverse_cdf(cumulative_rows(q.entries), u))
