"""
Stochastic matrices, chains and their backward products.

Provides the validated value types every other module works with, the
backward product Q(t2:t1) = Q(t2-1)...Q(t1), a numerical ergodicity
diagnostic and absolute probability sequences for finite-horizon chains.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field

from adapt_errors import (
    DimensionError,
    NegativeEntry,
    NotErgodicWithinHorizon,
    OutOfHorizon,
    ParamOutOfRange,
    ZeroRow,
)

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-9
# A scan whose spread has not at least halved since its midpoint shows no
# contraction and is reported as not-rank-one.
STAGNATION_RATIO = 0.5


class StochasticMatrix:
    """Row-stochastic n x n matrix. Rows are renormalized once, here."""

    __slots__ = ("_entries",)

    def __init__(self, entries):
        arr = np.array(entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
            raise DimensionError(f"Expected a non-empty square matrix, got shape {arr.shape}")
        if np.any(arr < 0):
            raise NegativeEntry(f"Stochastic matrix has a negative entry: {arr.min()}")
        sums = arr.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            worst = int(np.argmax(np.abs(sums - 1.0)))
            raise ParamOutOfRange(f"Row {worst} sums to {sums[worst]!r}, not 1")
        arr /= sums[:, None]
        arr.setflags(write=False)
        self._entries = arr

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def n(self) -> int:
        return self._entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self._entries if dtype is None else self._entries.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StochasticMatrix):
            return NotImplemented
        return np.array_equal(self._entries, other._entries)

    __hash__ = None

    def __repr__(self) -> str:
        return f"StochasticMatrix({self._entries.tolist()!r})"


class StochasticVector:
    """Non-negative vector with unit sum (within ROW_SUM_TOL)."""

    __slots__ = ("_entries",)

    def __init__(self, entries):
        arr = np.array(entries, dtype=np.float64).ravel()
        if arr.size == 0:
            raise DimensionError("Stochastic vector must be non-empty")
        # round-off from products can leave -1e-17 style entries
        arr[(arr < 0) & (arr > -ROW_SUM_TOL)] = 0.0
        if np.any(arr < 0):
            raise NegativeEntry(f"Stochastic vector has a negative entry: {arr.min()}")
        total = arr.sum()
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise ParamOutOfRange(f"Stochastic vector sums to {total!r}, not 1")
        arr.setflags(write=False)
        self._entries = arr

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def n(self) -> int:
        return self._entries.size

    def __array__(self, dtype=None, copy=None):
        return self._entries if dtype is None else self._entries.astype(dtype)

    def tolist(self) -> list[float]:
        return self._entries.tolist()

    def __repr__(self) -> str:
        return f"StochasticVector({self._entries.tolist()!r})"


def make_stochastic(raw) -> StochasticMatrix:
    """Divide every row of a non-negative matrix by its sum."""
    arr = np.array(raw, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {arr.shape}")
    if np.any(arr < 0):
        raise NegativeEntry(f"Cannot normalize a matrix with negative entry {arr.min()}")
    sums = arr.sum(axis=1)
    if np.any(sums <= 0):
        raise ZeroRow(f"Row {int(np.argmin(sums))} sums to zero")
    return StochasticMatrix(arr / sums[:, None])


class ChainProvenance(BaseModel):
    """Where a chain came from; serialized in place of its matrices when possible."""
    kind: Literal["generated-with-seed", "loaded-from-file", "closed-form"]
    descriptor: str
    seed: Optional[int] = None
    params: dict = Field(default_factory=dict)


class ChainSource:
    """
    Finite-horizon chain {Q(t)} for t in 0..H-1.

    Matrices come from ``factory(t)`` and are cached, so repeated calls with
    the same t return the identical object. The factory must be picklable
    for chains handed to worker processes.
    """

    def __init__(
        self,
        n: int,
        horizon: int,
        factory: Callable[[int], StochasticMatrix],
        provenance: ChainProvenance,
    ):
        if n < 1:
            raise ParamOutOfRange(f"Agent count must be positive, got {n}")
        if horizon < 1:
            raise ParamOutOfRange(f"Horizon must be positive, got {horizon}")
        self.n = n
        self.horizon = horizon
        self.provenance = provenance
        self._factory = factory
        self._cache: dict[int, StochasticMatrix] = {}

    def matrix_at(self, t: int) -> StochasticMatrix:
        if not 0 <= t < self.horizon:
            raise OutOfHorizon(f"t={t} outside the chain horizon [0, {self.horizon})")
        cached = self._cache.get(t)
        if cached is None:
            cached = self._factory(t)
            if cached.n != self.n:
                raise DimensionError(f"Q({t}) is {cached.n}x{cached.n}, chain is {self.n}x{self.n}")
            self._cache[t] = cached
        return cached

    def materialize(self) -> list[StochasticMatrix]:
        return [self.matrix_at(t) for t in range(self.horizon)]

    def __repr__(self) -> str:
        return f"ChainSource(n={self.n}, horizon={self.horizon}, descriptor={self.provenance.descriptor!r})"


def _check_window(chain: ChainSource, t1: int, t2: int) -> None:
    if t2 > chain.horizon:
        raise OutOfHorizon(f"t2={t2} exceeds the chain horizon {chain.horizon}")
    if not 0 <= t1 <= t2:
        raise OutOfHorizon(f"Need 0 <= t1 <= t2, got t1={t1}, t2={t2}")


def backward_product(chain: ChainSource, t1: int, t2: int) -> StochasticMatrix:
    """Q(t2:t1) = Q(t2-1) Q(t2-2) ... Q(t1), with Q(t:t) = I."""
    _check_window(chain, t1, t2)
    product = np.eye(chain.n)
    for t in range(t1, t2):
        product = chain.matrix_at(t).entries @ product
    return StochasticMatrix(product)


def column_spread(product: np.ndarray) -> float:
    """Max over columns of (column max - column min); zero iff rows are identical."""
    return float(np.max(product.max(axis=0) - product.min(axis=0)))


def _column_means(product: np.ndarray) -> StochasticVector:
    means = product.mean(axis=0)
    return StochasticVector(means / means.sum())


class ErgodicityDiagnostic(BaseModel):
    """Numerical evidence (never proof) that Q(t:t0) approaches a rank-one matrix."""
    t0: int
    t_used: int
    spread: float = Field(ge=0.0)
    psi_estimate: list[float]
    verdict: Literal["rank-one-within-tol", "not-rank-one", "horizon-exhausted"]
    tol: float


def ergodicity_diagnostic(
    chain: ChainSource,
    t0: int,
    tol: float,
    t_max: Optional[int] = None,
) -> ErgodicityDiagnostic:
    """
    Multiply Q(t:t0) forward until its rows agree within tol.

    Stops at the first t with spread < tol. When t_max is reached first the
    verdict is not-rank-one if the spread stopped contracting over the second
    half of the scan, otherwise horizon-exhausted.
    """
    t_max = chain.horizon if t_max is None else t_max
    if tol <= 0:
        raise ParamOutOfRange(f"Tolerance must be positive, got {tol}")
    if t_max > chain.horizon:
        raise OutOfHorizon(f"t_max={t_max} exceeds the chain horizon {chain.horizon}")
    if not 0 <= t0 < t_max:
        raise OutOfHorizon(f"Need 0 <= t0 < t_max, got t0={t0}, t_max={t_max}")

    product = np.eye(chain.n)
    spread = column_spread(product)
    midpoint = t0 + (t_max - t0) // 2
    mid_spread = spread
    t = t0
    while spread >= tol and t < t_max:
        product = chain.matrix_at(t).entries @ product
        t += 1
        spread = column_spread(product)
        if t == midpoint:
            mid_spread = spread

    if spread < tol:
        verdict = "rank-one-within-tol"
    elif spread >= STAGNATION_RATIO * mid_spread:
        verdict = "not-rank-one"
    else:
        verdict = "horizon-exhausted"
    logger.debug("ergodicity scan from t0=%d stopped at t=%d with spread %.3e (%s)", t0, t, spread, verdict)
    return ErgodicityDiagnostic(
        t0=t0,
        t_used=t,
        spread=spread,
        psi_estimate=_column_means(product).tolist(),
        verdict=verdict,
        tol=tol,
    )


def absolute_probability_sequence(
    chain: ChainSource,
    t0: int,
    tol: float,
    t_max: Optional[int] = None,
) -> list[StochasticVector]:
    """
    Absolute probability sequence psi(t0), ..., psi(t_anchor).

    t_anchor is the first time at which Q(t_anchor:t0) is rank-one within tol.
    psi(t_anchor) is the column-mean estimate of the forward scan from
    t_anchor, and earlier entries follow psi(t)^T = psi(t+1)^T Q(t).
    Element k of the returned list is psi(t0 + k).
    """
    t_max = chain.horizon if t_max is None else t_max
    first = ergodicity_diagnostic(chain, t0, tol, t_max)
    if first.verdict != "rank-one-within-tol":
        raise NotErgodicWithinHorizon(
            f"Q(t:{t0}) is not rank-one within {tol} before t={first.t_used} (spread {first.spread:.3e})"
        )
    t_anchor = first.t_used
    if t_anchor == t0:
        return [StochasticVector(first.psi_estimate)]
    if t_anchor >= t_max:
        raise NotErgodicWithinHorizon(f"No horizon left after the anchor t={t_anchor} to estimate psi there")
    anchored = ergodicity_diagnostic(chain, t_anchor, tol, t_max)
    if anchored.verdict != "rank-one-within-tol":
        raise NotErgodicWithinHorizon(
            f"Q(t:{t_anchor}) is not rank-one within {tol} before t={anchored.t_used}"
        )
    logger.debug("APS anchored at t=%d for t0=%d", t_anchor, t0)

    psi = np.array(anchored.psi_estimate)
    sequence = [StochasticVector(psi)]
    for t in range(t_anchor - 1, t0 - 1, -1):
        psi = psi @ chain.matrix_at(t).entries
        sequence.append(StochasticVector(psi))
    sequence.reverse()
    return sequence
