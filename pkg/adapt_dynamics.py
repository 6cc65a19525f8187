"""
Update rules of the random adaptation dynamics.

States are tagged with the origin of the value each agent holds: origins
0..n-1 are the initial states x_i(t0), origins n..2n-1 the prejudices u_i.
Agents only ever copy, so agreement and absorption are decided on the tags
and never on float comparisons of computed numbers.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel

from adapt_core import ChainSource, StochasticVector
from adapt_errors import DimensionError, OutOfHorizon, OverlapError, ParamOutOfRange
from adapt_sampling import (
    Channel,
    RngStream,
    SelectionMatrix,
    SusceptibilityDraw,
    cumulative_rows,
    inverse_cdf,
    sample_adaptation,
    sample_mutation,
    sample_susceptibility,
)

logger = logging.getLogger(__name__)

DEFAULT_RECORD_CAP = 2000


class TaggedState:
    """
    Per-agent origins plus the shared table of values they denote.

    ``table`` holds x(t0) followed (for the FJ variants) by u, so
    ``values[i] == table[origins[i]]`` bit for bit.
    """

    __slots__ = ("origins", "table")

    def __init__(self, origins, table):
        origins = np.asarray(origins, dtype=np.int64)
        table = np.asarray(table, dtype=np.float64)
        if origins.ndim != 1 or np.any(origins < 0) or np.any(origins >= table.size):
            raise DimensionError(f"Origins {origins.tolist()} do not index a table of {table.size} values")
        self.origins = origins
        self.table = table

    @classmethod
    def initial(cls, x0, u=None) -> "TaggedState":
        x0 = np.asarray(x0, dtype=np.float64)
        table = x0 if u is None else np.concatenate([x0, np.asarray(u, dtype=np.float64)])
        return cls(np.arange(x0.size), table)

    @classmethod
    def prejudices(cls, x0, u) -> "TaggedState":
        """The vector u itself, agent i carrying origin n + i."""
        state = cls.initial(x0, u)
        n = np.asarray(x0).size
        return cls(np.arange(n, 2 * n), state.table)

    @property
    def n(self) -> int:
        return self.origins.size

    @property
    def values(self) -> np.ndarray:
        return self.table[self.origins]

    def agreed(self) -> bool:
        values = self.values
        return bool(np.all(values == values[0]))

    def absorbed(self) -> bool:
        return bool(np.all(self.origins >= self.n))

    def with_origins(self, origins) -> "TaggedState":
        return TaggedState(origins, self.table)


@dataclass
class Trajectory:
    """Origins per recorded step plus the summary times of one trial."""
    t0: int
    table: np.ndarray
    states: list[np.ndarray] = field(default_factory=list)
    final_time: int = 0
    terminal_origins: Optional[np.ndarray] = None
    agreement_time: Optional[int] = None
    absorption_time: Optional[int] = None
    absorption_exits: int = 0
    first_all_reset: Optional[int] = None

    @property
    def recorded_until(self) -> int:
        return self.t0 + len(self.states) - 1

    def origins_at(self, t: int) -> np.ndarray:
        if not self.t0 <= t <= self.recorded_until:
            raise OutOfHorizon(f"t={t} not recorded (recorded {self.t0}..{self.recorded_until})")
        return self.states[t - self.t0]

    def values_at(self, t: int) -> np.ndarray:
        return self.table[self.origins_at(t)]

    @property
    def terminal_values(self) -> np.ndarray:
        return self.table[self.terminal_origins]


@dataclass
class BackwardWalk:
    """z(t) of the time-reversed chain for t = t_inf down to t_stop."""
    t_inf: int
    t_stop: int
    positions: np.ndarray

    def position(self, t: int) -> int:
        if not self.t_stop <= t <= self.t_inf:
            raise OutOfHorizon(f"t={t} outside the walk {self.t_stop}..{self.t_inf}")
        return int(self.positions[self.t_inf - t])


class TrialSummary(BaseModel):
    trial: int
    agreement_time: Optional[int] = None
    absorption_time: Optional[int] = None
    terminal_origins: list[int]


def _check_match(x: TaggedState, *selections) -> None:
    for sel in selections:
        if sel.n != x.n:
            raise DimensionError(f"State has {x.n} agents but a draw has {sel.n}")


def step_base(x: TaggedState, sel: SelectionMatrix) -> TaggedState:
    """x(t+1) = A(t) x(t): agent i copies agent sel.select[i]."""
    _check_match(x, sel)
    return x.with_origins(x.origins[sel.select])


def step_fj(x: TaggedState, sel: SelectionMatrix, lam: SusceptibilityDraw, u: TaggedState) -> TaggedState:
    """x(t+1) = Lambda(t) A(t) x(t) + (I - Lambda(t)) u."""
    _check_match(x, sel, lam, u)
    return x.with_origins(np.where(lam.lam == 1, x.origins[sel.select], u.origins))


def step_rank_one(
    x: TaggedState,
    sel_A: SelectionMatrix,
    lam: SusceptibilityDraw,
    sel_C: SelectionMatrix,
    u: TaggedState,
) -> TaggedState:
    """x(t+1) = Lambda(t) A(t) x(t) + (I - Lambda(t)) C(t) u."""
    _check_match(x, sel_A, lam, sel_C, u)
    return x.with_origins(np.where(lam.lam == 1, x.origins[sel_A.select], u.origins[sel_C.select]))


def _check_run_window(chain: ChainSource, t0: int, t_max: int) -> None:
    if t_max > chain.horizon:
        raise OutOfHorizon(f"t_max={t_max} exceeds the chain horizon {chain.horizon}")
    if not 0 <= t0 < t_max:
        raise OutOfHorizon(f"Need 0 <= t0 < t_max, got t0={t0}, t_max={t_max}")


def _initial_values(x0, n: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (n,):
        raise DimensionError(f"Initial state has shape {x0.shape}, chain has {n} agents")
    return x0


def run_base(
    chain: ChainSource,
    x0,
    t0: int,
    t_max: int,
    stream: RngStream,
    record_cap: int = DEFAULT_RECORD_CAP,
    stop_on_agreement: bool = False,
) -> Trajectory:
    """
    Base-case copying from t0 to t_max.

    Agreement is absorbing, so with ``stop_on_agreement`` the run ends at the
    agreement time and the terminal state is the agreed one.
    """
    _check_run_window(chain, t0, t_max)
    x = TaggedState.initial(_initial_values(x0, chain.n))
    trajectory = Trajectory(t0=t0, table=x.table, states=[x.origins])
    agreed_values = None
    if x.agreed():
        trajectory.agreement_time = t0
        agreed_values = x.values

    t = t0
    while t < t_max and not (stop_on_agreement and agreed_values is not None):
        x = step_base(x, sample_adaptation(chain.matrix_at(t), stream.at(t)))
        t += 1
        if len(trajectory.states) <= record_cap:
            trajectory.states.append(x.origins)
        if agreed_values is None:
            if x.agreed():
                trajectory.agreement_time = t
                agreed_values = x.values
        else:
            assert np.array_equal(x.values, agreed_values), f"agreement broken at t={t}"

    trajectory.final_time = t
    trajectory.terminal_origins = x.origins
    return trajectory


def run_time_reversed(
    chain: ChainSource,
    t_inf: int,
    p_inf: StochasticVector,
    stream: RngStream,
    t_stop: int = 0,
) -> BackwardWalk:
    """
    Walk z(t) backward from t_inf: z(t_inf) ~ p_inf, then
    Pr(z(t) = j | z(t+1) = i) = q_ij(t).
    """
    if t_inf > chain.horizon:
        raise OutOfHorizon(f"t_inf={t_inf} exceeds the chain horizon {chain.horizon}")
    if not 0 <= t_stop <= t_inf:
        raise OutOfHorizon(f"Need 0 <= t_stop <= t_inf, got t_stop={t_stop}, t_inf={t_inf}")
    if p_inf.n != chain.n:
        raise DimensionError(f"p_inf has {p_inf.n} entries, chain has {chain.n} agents")

    positions = np.empty(t_inf - t_stop + 1, dtype=np.int64)
    u = stream.at(t_inf, Channel.WALK_START).uniforms(1)
    current = int(inverse_cdf(cumulative_rows(p_inf.entries), u)[0])
    positions[0] = current
    for k, t in enumerate(range(t_inf - 1, t_stop - 1, -1), start=1):
        u = stream.at(t, Channel.WALK).uniforms(1)
        row = cumulative_rows(chain.matrix_at(t).entries[current])
        current = int(inverse_cdf(row, u)[0])
        positions[k] = current
    return BackwardWalk(t_inf=t_inf, t_stop=t_stop, positions=positions)


GammaSchedule = Callable[[int], np.ndarray]


def susceptibility_schedule(gamma, n: int) -> GammaSchedule:
    """
    Accept a callable t -> gamma(t), a constant length-n vector, a scalar, or
    a (T, n) table indexed by time.
    """
    if callable(gamma):
        return gamma
    table = np.asarray(gamma, dtype=np.float64)
    if table.ndim == 0:
        table = np.full(n, float(table))
    if np.any(table < 0) or np.any(table > 1):
        raise ParamOutOfRange(f"Susceptibilities must lie in [0, 1], got {table.tolist()}")
    if table.shape == (n,):
        return _ConstantGamma(table)
    if table.ndim == 2 and table.shape[1] == n:
        return _TabulatedGamma(table)
    raise DimensionError(f"Susceptibility schedule of shape {table.shape} does not fit {n} agents")


@dataclass(frozen=True)
class _ConstantGamma:
    gamma: np.ndarray

    def __call__(self, t: int) -> np.ndarray:
        return self.gamma


@dataclass(frozen=True)
class _TabulatedGamma:
    table: np.ndarray

    def __call__(self, t: int) -> np.ndarray:
        if not 0 <= t < self.table.shape[0]:
            raise OutOfHorizon(f"Susceptibility schedule has no entry for t={t}")
        return self.table[t]


def _prejudice_state(x0, u, n: int, track_absorption: bool) -> tuple[TaggedState, TaggedState]:
    x0 = _initial_values(x0, n)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (n,):
        raise DimensionError(f"Prejudice vector has shape {u.shape}, chain has {n} agents")
    if track_absorption:
        shared = set(x0.tolist()) & set(u.tolist())
        if shared:
            raise OverlapError(f"Initial states and prejudices share values {sorted(shared)}")
    return TaggedState.initial(x0, u), TaggedState.prejudices(x0, u)


def _run_with_prejudices(
    chain: ChainSource,
    x: TaggedState,
    t0: int,
    t_max: int,
    step: Callable[[int, TaggedState], tuple[TaggedState, bool]],
    record_cap: int,
    stop_on_absorption: bool = False,
) -> Trajectory:
    trajectory = Trajectory(t0=t0, table=x.table, states=[x.origins])
    candidate = t0 if x.absorbed() else None
    ever_absorbed = candidate is not None
    t = t0
    while t < t_max and not (stop_on_absorption and candidate is not None):
        x, all_reset = step(t, x)
        if all_reset and trajectory.first_all_reset is None:
            trajectory.first_all_reset = t
        if len(trajectory.states) <= record_cap:
            trajectory.states.append(x.origins)
        if x.absorbed():
            if candidate is None:
                candidate = t + 1
            ever_absorbed = True
        else:
            if ever_absorbed:
                trajectory.absorption_exits += 1
            candidate = None
        t += 1
    trajectory.absorption_time = candidate
    trajectory.final_time = t
    trajectory.terminal_origins = x.origins
    return trajectory


def run_fj(
    chain: ChainSource,
    gamma_schedule,
    u,
    x0,
    t0: int,
    t_max: int,
    stream: RngStream,
    track_absorption: bool = True,
    record_cap: int = DEFAULT_RECORD_CAP,
    stop_on_absorption: bool = False,
) -> Trajectory:
    """
    Random Friedkin-Johnsen dynamics: each agent adapts socially with
    probability gamma_i(t) and otherwise resets to its own prejudice.

    absorption_time is the first t from which every origin is a prejudice
    through t_max. Absorption is permanent, so ``stop_on_absorption`` ends the run at the
    absorption time.
    """
    _check_run_window(chain, t0, t_max)
    x, prejudice = _prejudice_state(x0, u, chain.n, track_absorption)
    gamma_at = susceptibility_schedule(gamma_schedule, chain.n)

    def step(t: int, state: TaggedState) -> tuple[TaggedState, bool]:
        key = stream.at(t)
        lam = sample_susceptibility(gamma_at(t), key)
        sel = sample_adaptation(chain.matrix_at(t), key)
        return step_fj(state, sel, lam, prejudice), not lam.lam.any()

    return _run_with_prejudices(chain, x, t0, t_max, step, record_cap, stop_on_absorption)


def run_rank_one(
    chain: ChainSource,
    gamma,
    q: StochasticVector,
    u,
    x0,
    t0: int,
    t_max: int,
    stream: RngStream,
    track_absorption: bool = True,
    record_cap: int = DEFAULT_RECORD_CAP,
    stop_on_absorption: bool = False,
) -> Trajectory:
    """
    Rank-one mutation dynamics: with probability 1 - gamma_i an agent adopts
    prejudice u_j drawn from q instead of its own.

    ``first_all_reset`` records the first step at which every agent reset
    simultaneously; from the next step on all origins are prejudices.
    """
    _check_run_window(chain, t0, t_max)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim == 0:
        gamma = np.full(chain.n, float(gamma))
    if gamma.shape != (chain.n,) or np.any(gamma < 0) or np.any(gamma > 1):
        raise ParamOutOfRange(f"Constant susceptibilities in [0, 1] required, got {gamma.tolist()}")
    x, prejudice = _prejudice_state(x0, u, chain.n, track_absorption)

    def step(t: int, state: TaggedState) -> tuple[TaggedState, bool]:
        key = stream.at(t)
        lam = sample_susceptibility(gamma, key)
        sel_A = sample_adaptation(chain.matrix_at(t), key)
        sel_C = sample_mutation(q, chain.n, key)
        return step_rank_one(state, sel_A, lam, sel_C, prejudice), not lam.lam.any()

    return _run_with_prejudices(chain, x, t0, t_max, step, record_cap, stop_on_absorption)


def summarize(trajectory: Trajectory, trial: int) -> TrialSummary:
    return TrialSummary(
        trial=trial,
        agreement_time=trajectory.agreement_time,
        absorption_time=trajectory.absorption_time,
        terminal_origins=trajectory.terminal_origins.tolist(),
    )


def write_trajectory_csv(trajectory: Trajectory, path: str | Path) -> Path:
    """One row per (t, agent): ``t,agent,origin,value``."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "agent", "origin", "value"])
        for k, origins in enumerate(trajectory.states):
            t = trajectory.t0 + k
            for agent, origin in enumerate(origins.tolist()):
                writer.writerow([t, agent, origin, repr(float(trajectory.table[origin]))])
    return path
