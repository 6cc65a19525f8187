"""
Monte Carlo estimators and closed-form oracles.

Estimators run independent trials keyed by trial index (optionally spread
over worker processes) and merge their tallies by summation, so a report
depends only on the master seed and the trial count. Every report carries
binomial standard errors and, when one exists, the oracle it is checked
against.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Literal, Optional

import numpy as np
import scipy.linalg
from pydantic import BaseModel, Field
from scipy import stats

from adapt_core import (
    ChainSource,
    StochasticMatrix,
    StochasticVector,
    absolute_probability_sequence,
    backward_product,
)
from adapt_dynamics import (
    run_base,
    run_fj,
    run_rank_one,
    run_time_reversed,
    susceptibility_schedule,
)
from adapt_errors import (
    BadSubset,
    DimensionError,
    NonAgreeingTrial,
    NotErgodicWithinHorizon,
    OracleMismatch,
    ParamOutOfRange,
    SingularSystem,
    TooLargeToEnumerate,
)
from adapt_generators import random_irreducible_chain
from adapt_sampling import RngStream

logger = logging.getLogger(__name__)

APS_TOL = 1e-10
LIMIT_TOL = 1e-9
NEUMANN_TAIL = 1e-12
LEMMA_PRUNE = 1e-18
LEMMA_SLACK = 1e-12
MAX_LEMMA_STATES = 10_000_000
MAX_EXHAUSTIVE_SEQUENCES = 2_000_000
DIVERGE_RATIO = 0.5
CONVERGE_RATIO = 0.25
ZERO_GROWTH = 1e-12


# Data Models
class EnsembleReport(BaseModel):
    """Empirical probabilities of one estimator with their binomial errors."""
    estimator: str
    trials: int
    excluded: int = 0
    estimate: list
    std_err: list
    oracle: Optional[list] = None
    oracle_label: Optional[str] = None
    transient_oracle: Optional[list] = None
    max_abs_deviation: Optional[float] = None
    residual_mass: Optional[list[float]] = None
    seed: int
    details: dict = Field(default_factory=dict)

    def deviation_sigmas(self, reference: Optional[list] = None) -> float:
        """Largest |estimate - reference| in units of the larger binomial error."""
        reference = self.oracle if reference is None else reference
        if reference is None:
            raise ParamOutOfRange(f"{self.estimator} report has no oracle to compare against")
        est = np.asarray(self.estimate, dtype=float)
        ref = np.asarray(reference, dtype=float)
        err = np.maximum(np.asarray(self.std_err, dtype=float), binomial_std_err(ref, self.trials))
        diff = np.abs(est - ref)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(diff == 0, 0.0, diff / err)
        return float(np.max(z))

    def within(self, sigmas: float = 3.0, reference: Optional[list] = None) -> bool:
        return self.deviation_sigmas(reference) <= sigmas

    def csv_rows(self) -> list[tuple]:
        """(i, j, estimate, std_err, oracle) with matrices flattened row-major."""
        est = np.atleast_2d(np.asarray(self.estimate, dtype=float))
        err = np.atleast_2d(np.asarray(self.std_err, dtype=float))
        ora = None if self.oracle is None else np.atleast_2d(np.asarray(self.oracle, dtype=float))
        rows = []
        for i, j in itertools.product(range(est.shape[0]), range(est.shape[1])):
            rows.append((i, j, float(est[i, j]), float(err[i, j]), None if ora is None else float(ora[i, j])))
        return rows


class DivergenceDiagnostic(BaseModel):
    """Partial sums of a non-negative series with a clearly heuristic trend label."""
    label: str
    partial_sums: list[float]
    early_growth: float
    late_growth: float
    classification: Literal["diverging-trend", "converging-trend", "inconclusive"]


class LemmaCheck(BaseModel):
    n: int
    S: list[int]
    ell: int
    t: int
    delta: int
    lhs: float
    rhs: float
    holds: bool


class MeanComparison(BaseModel):
    """Empirical mean of x(t) next to the averaging dynamics Q(t:t0) x0."""
    t0: int
    trials: int
    seed: int
    empirical: list[list[float]]
    oracle: list[list[float]]
    max_abs_deviation: float


def binomial_std_err(p, trials: int) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if trials <= 0:
        return np.full(p.shape, np.inf)
    return np.sqrt(np.clip(p * (1.0 - p), 0.0, None) / trials)


def max_abs_deviation(estimate, oracle) -> float:
    return float(np.max(np.abs(np.asarray(estimate, dtype=float) - np.asarray(oracle, dtype=float))))


def reports_differ(a: EnsembleReport, b: EnsembleReport, sigmas: float = 3.0) -> bool:
    """True when some coordinate differs by more than ``sigmas`` combined standard errors."""
    diff = np.abs(np.asarray(a.estimate, dtype=float) - np.asarray(b.estimate, dtype=float))
    err = np.hypot(np.asarray(a.std_err, dtype=float), np.asarray(b.std_err, dtype=float))
    return bool(np.any(diff > sigmas * err))


# Trial plumbing
def _chunks(trials: int, pieces: int) -> list[range]:
    pieces = max(1, min(pieces, trials))
    bounds = np.linspace(0, trials, pieces + 1).astype(int)
    return [range(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _map_trials(worker: Callable[[range], dict], trials: int, workers: int) -> dict:
    """Run ``worker`` over chunks of trial indices and sum the returned tallies."""
    if trials < 1:
        raise ParamOutOfRange(f"Need at least one trial, got {trials}")
    chunks = _chunks(trials, 4 * workers if workers > 1 else 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(worker, chunks))
    else:
        parts = [worker(chunk) for chunk in chunks]
    total = parts[0]
    for part in parts[1:]:
        for key, value in part.items():
            total[key] = total[key] + value
    return total


# Base case
def _agreement_worker(chain: ChainSource, x0, t0: int, t_max: int, seed: int, trials: range) -> dict:
    counts = np.zeros(chain.n, dtype=np.int64)
    times = np.zeros(t_max - t0 + 1, dtype=np.int64)
    excluded = 0
    for trial in trials:
        trajectory = run_base(chain, x0, t0, t_max, RngStream(seed, trial), record_cap=0, stop_on_agreement=True)
        if trajectory.agreement_time is None:
            excluded += 1
            continue
        counts[trajectory.terminal_origins[0]] += 1
        times[trajectory.agreement_time - t0] += 1
    return {"counts": counts, "times": times, "excluded": excluded}


def _require_distinct(x0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if np.unique(x0).size != x0.size:
        raise ParamOutOfRange(f"Initial values must be pairwise distinct, got {x0.tolist()}")
    return x0


def _agreement_tally(chain, x0, t0, t_max, trials, seed, workers) -> dict:
    x0 = _require_distinct(x0)
    t_max = chain.horizon if t_max is None else t_max
    tally = _map_trials(partial(_agreement_worker, chain, x0, t0, t_max, seed), trials, workers)
    if tally["excluded"]:
        logger.warning("%d of %d trials did not agree before t=%d", tally["excluded"], trials, t_max)
    if tally["excluded"] == trials:
        raise NonAgreeingTrial(f"None of {trials} trials reached agreement before t={t_max}")
    return tally


def agreement_distribution(
    chain: ChainSource,
    x0,
    t0: int,
    trials: int,
    seed: int,
    t_max: Optional[int] = None,
    tol: float = APS_TOL,
    workers: int = 1,
) -> EnsembleReport:
    """
    Distribution of the agreed value over trials, against psi(t0).

    Trials that do not agree before t_max are excluded and counted.
    """
    psi = absolute_probability_sequence(chain, t0, tol)[0]
    tally = _agreement_tally(chain, x0, t0, t_max, trials, seed, workers)
    agreed = trials - tally["excluded"]
    estimate = tally["counts"] / agreed
    return EnsembleReport(
        estimator="agreement-distribution",
        trials=agreed,
        excluded=tally["excluded"],
        estimate=estimate.tolist(),
        std_err=binomial_std_err(estimate, agreed).tolist(),
        oracle=psi.tolist(),
        oracle_label=f"absolute probability sequence psi({t0})",
        max_abs_deviation=max_abs_deviation(estimate, psi.entries),
        seed=seed,
    )


def two_state_agreement_rate(p: float, q: float) -> float:
    """Per-step probability that the two agents of [[p,1-p],[1-q,q]] copy the same source."""
    return p * (1.0 - q) + (1.0 - p) * q


def agreement_times(
    chain: ChainSource,
    x0,
    t0: int,
    trials: int,
    seed: int,
    t_max: Optional[int] = None,
    geometric_rate: Optional[float] = None,
    workers: int = 1,
) -> EnsembleReport:
    """
    Distribution of T - t0 for agreeing trials.

    With ``geometric_rate`` the report carries the Geometric pmf as oracle and
    a chi-square goodness-of-fit p-value over bins holding at least five
    expected trials (the tail merged into the last bin).
    """
    tally = _agreement_tally(chain, x0, t0, t_max, trials, seed, workers)
    agreed = trials - tally["excluded"]
    times = tally["times"]
    last = int(np.max(np.nonzero(times)[0]))
    pmf = times[: last + 1] / agreed
    steps = np.arange(last + 1)
    details = {
        "mean": float(np.dot(steps, times[: last + 1]) / agreed),
        "median": float(np.searchsorted(np.cumsum(times), agreed / 2.0)),
        "agreed_fraction": agreed / trials,
    }
    oracle = None
    if geometric_rate is not None:
        oracle = stats.geom.pmf(steps, geometric_rate)
        details["chi2_pvalue"] = _geometric_fit_pvalue(times, agreed, geometric_rate)
    return EnsembleReport(
        estimator="agreement-time",
        trials=agreed,
        excluded=tally["excluded"],
        estimate=pmf.tolist(),
        std_err=binomial_std_err(pmf, agreed).tolist(),
        oracle=None if oracle is None else oracle.tolist(),
        oracle_label=None if oracle is None else f"Geometric({geometric_rate})",
        max_abs_deviation=None if oracle is None else max_abs_deviation(pmf, oracle),
        seed=seed,
        details=details,
    )


def _geometric_fit_pvalue(times: np.ndarray, agreed: int, rate: float) -> float:
    k = 1
    while agreed * stats.geom.sf(k, rate) >= 5.0:
        k += 1
    # bins 1..k-1 then a tail bin for >= k
    expected = agreed * np.append(stats.geom.pmf(np.arange(1, k), rate), stats.geom.sf(k - 1, rate))
    observed = np.append(times[1:k], times[k:].sum()).astype(float)
    if observed.size < 2:
        return 1.0
    return float(stats.chisquare(observed, expected * observed.sum() / expected.sum()).pvalue)


def _cluster_worker(chain: ChainSource, x0, t0: int, t_max: int, seed: int, groups, trials: range) -> dict:
    counts = np.zeros(chain.n + 1, dtype=np.int64)
    groups_agreed = 0
    global_agreement = 0
    for trial in trials:
        trajectory = run_base(chain, x0, t0, t_max, RngStream(seed, trial), record_cap=0)
        values = trajectory.terminal_values
        counts[np.unique(values).size] += 1
        global_agreement += int(trajectory.agreement_time is not None)
        if groups and all(np.unique(values[list(g)]).size == 1 for g in groups):
            groups_agreed += 1
    return {"counts": counts, "groups_agreed": groups_agreed, "global_agreement": global_agreement}


def cluster_counts(
    chain: ChainSource,
    x0,
    t0: int,
    trials: int,
    seed: int,
    t_max: Optional[int] = None,
    groups: Optional[Sequence[Sequence[int]]] = None,
    workers: int = 1,
) -> EnsembleReport:
    """
    Distribution of the number of distinct terminal values at t_max.

    ``groups`` (for instance the two blocks of a block chain) adds the
    fraction of trials in which every group ended internally agreed.
    """
    x0 = _require_distinct(x0)
    t_max = chain.horizon if t_max is None else t_max
    tally = _map_trials(partial(_cluster_worker, chain, x0, t0, t_max, seed, groups), trials, workers)
    pmf = tally["counts"][1:] / trials
    return EnsembleReport(
        estimator="cluster-count",
        trials=trials,
        estimate=pmf.tolist(),
        std_err=binomial_std_err(pmf, trials).tolist(),
        seed=seed,
        details={
            "groups_agreed_fraction": tally["groups_agreed"] / trials if groups else None,
            "global_agreement_fraction": tally["global_agreement"] / trials,
        },
    )


def _mean_worker(chain: ChainSource, x0, t0: int, t_max: int, seed: int, trials: range) -> dict:
    steps = t_max - t0 + 1
    total = np.zeros((steps, chain.n))
    squares = np.zeros((steps, chain.n))
    for trial in trials:
        trajectory = run_base(chain, x0, t0, t_max, RngStream(seed, trial), record_cap=steps, stop_on_agreement=True)
        values = trajectory.table[np.array(trajectory.states)]
        # agreement is absorbing, so the agreed state fills the rest of the window
        if values.shape[0] < steps:
            values = np.vstack([values, np.repeat(values[-1:], steps - values.shape[0], axis=0)])
        total += values
        squares += values * values
    return {"total": total, "squares": squares}


def expected_dynamics(chain: ChainSource, x0, t0: int, t_max: int) -> np.ndarray:
    """Rows Q(t:t0) x0 for t = t0..t_max."""
    x = np.asarray(x0, dtype=float)
    rows = [x]
    for t in range(t0, t_max):
        x = chain.matrix_at(t).entries @ x
        rows.append(x)
    return np.array(rows)


def mean_dynamics(
    chain: ChainSource,
    x0,
    t0: int,
    t_max: int,
    trials: int,
    seed: int,
    workers: int = 1,
) -> MeanComparison:
    """Trialwise average of x(t) against the deterministic averaging dynamics."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (chain.n,):
        raise DimensionError(f"Initial state has shape {x0.shape}, chain has {chain.n} agents")
    tally = _map_trials(partial(_mean_worker, chain, x0, t0, t_max, seed), trials, workers)
    empirical = tally["total"] / trials
    oracle = expected_dynamics(chain, x0, t0, t_max)
    return MeanComparison(
        t0=t0,
        trials=trials,
        seed=seed,
        empirical=empirical.tolist(),
        oracle=oracle.tolist(),
        max_abs_deviation=max_abs_deviation(empirical, oracle),
    )


# Friedkin-Johnsen oracles
def _as_entries(Q) -> np.ndarray:
    Q = Q if isinstance(Q, StochasticMatrix) else StochasticMatrix(Q)
    return Q.entries


def _susceptibility_diagonal(gamma, n: int) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 0:
        gamma = np.full(n, float(gamma))
    if gamma.ndim == 2:
        gamma = np.diag(gamma)
    if gamma.shape != (n,):
        raise DimensionError(f"Susceptibility has shape {gamma.shape}, need {n} entries")
    if np.any(gamma < 0) or np.any(gamma >= 1):
        raise ParamOutOfRange(f"Susceptibilities must lie in [0, 1), got {gamma.tolist()}")
    return gamma


def fj_limit_matrix(Q, gamma) -> np.ndarray:
    """V = (I - Gamma Q)^{-1} (I - Gamma), by a direct solve of (I - Gamma Q) V = I - Gamma."""
    entries = _as_entries(Q)
    n = entries.shape[0]
    g = _susceptibility_diagonal(gamma, n)
    lhs = np.eye(n) - g[:, None] * entries
    rhs = np.diag(1.0 - g)
    try:
        V = scipy.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularSystem(f"I - Gamma Q is singular: {e}")
    row_error = float(np.max(np.abs(V.sum(axis=1) - 1.0)))
    if row_error > LIMIT_TOL:
        raise SingularSystem(f"Limit matrix rows miss 1 by {row_error:.3e}; system is ill-conditioned")
    return V


def fj_transient_matrix(Q, gamma, steps: int) -> np.ndarray:
    """sum_{k<steps} (Gamma Q)^k (I - Gamma): Pr(x_i = u_j) after ``steps`` i.i.d. steps."""
    entries = _as_entries(Q)
    n = entries.shape[0]
    g = _susceptibility_diagonal(gamma, n)
    GQ = g[:, None] * entries
    reset = np.diag(1.0 - g)
    power = np.eye(n)
    total = np.zeros((n, n))
    for _ in range(steps):
        total += power @ reset
        power = GQ @ power
    return total


def neumann_terms(gamma, tail: float = NEUMANN_TAIL) -> int:
    """Smallest K with gamma_max^K < tail."""
    gamma_max = float(np.max(gamma))
    if gamma_max == 0.0:
        return 1
    return int(math.ceil(math.log(tail) / math.log(gamma_max))) + 1


def rank_one_transient_matrix(Q, gamma, q, steps: int) -> np.ndarray:
    """R(t) = sum_{k<steps} (Gamma Q)^k (I - Gamma) 1 q^T."""
    q = q if isinstance(q, StochasticVector) else StochasticVector(q)
    reach = fj_transient_matrix(Q, gamma, steps).sum(axis=1)
    return np.outer(reach, q.entries)


def rank_one_limit_matrix(Q, gamma, q, cross_check: bool = True) -> np.ndarray:
    """
    V = (I - Gamma Q)^{-1} (I - Gamma) 1 q^T, cross-checked against the
    truncated Neumann series.
    """
    q = q if isinstance(q, StochasticVector) else StochasticVector(q)
    entries = _as_entries(Q)
    if q.n != entries.shape[0]:
        raise DimensionError(f"Mutation distribution has {q.n} entries, matrix is {entries.shape[0]}x{entries.shape[0]}")
    V = np.outer(fj_limit_matrix(entries, gamma).sum(axis=1), q.entries)
    if cross_check:
        g = _susceptibility_diagonal(gamma, q.n)
        series = rank_one_transient_matrix(entries, g, q, neumann_terms(g))
        gap = max_abs_deviation(V, series)
        if gap > LIMIT_TOL:
            raise OracleMismatch(f"Closed form and Neumann series differ by {gap:.3e}")
    return V


def _static_matrix(chain: ChainSource, steps: int) -> Optional[StochasticMatrix]:
    first = chain.matrix_at(0)
    for t in range(1, min(steps, chain.horizon)):
        if chain.matrix_at(t) != first:
            return None
    return first


def _opinion_worker(chain, variant, gamma, q, u, x0, t_probe, seed, trials: range) -> dict:
    n = chain.n
    counts = np.zeros((n, n), dtype=np.int64)
    for trial in trials:
        stream = RngStream(seed, trial)
        if variant == "fj":
            trajectory = run_fj(chain, gamma, u, x0, 0, t_probe, stream, record_cap=0)
        else:
            trajectory = run_rank_one(chain, gamma, q, u, x0, 0, t_probe, stream, record_cap=0)
        origins = trajectory.terminal_origins
        absorbed = origins >= n
        counts[np.nonzero(absorbed)[0], origins[absorbed] - n] += 1
    return {"counts": counts}


def fj_opinion_distribution(
    chain: ChainSource,
    gamma,
    u,
    x0,
    t_probe: int,
    trials: int,
    seed: int,
    variant: Literal["fj", "rank-one"] = "fj",
    q=None,
    workers: int = 1,
) -> EnsembleReport:
    """
    Pr(x_i(t_probe) = u_j) estimated over trials started at t0 = 0.

    The oracle is the limit matrix V; ``transient_oracle`` holds the exact
    finite-time marginals, and ``residual_mass`` the per-agent probability of
    not yet holding a prejudice. Needs a static chain, except for the rank-one
    variant with identical susceptibilities, whose limit is 1 q^T for any chain.
    """
    n = chain.n
    g = _susceptibility_diagonal(gamma, n)
    u = np.asarray(u, dtype=float)
    if np.unique(u).size != n or u.size != n:
        raise ParamOutOfRange(f"Need n={n} distinct prejudices, got {u.tolist()}")
    if variant == "rank-one":
        q = q if isinstance(q, StochasticVector) else StochasticVector(q)
    elif variant != "fj":
        raise ParamOutOfRange(f"Unknown variant {variant!r}")

    Q = _static_matrix(chain, t_probe)
    if Q is not None:
        if variant == "fj":
            oracle, transient = fj_limit_matrix(Q, g), fj_transient_matrix(Q, g, t_probe)
        else:
            oracle, transient = rank_one_limit_matrix(Q, g, q), rank_one_transient_matrix(Q, g, q, t_probe)
        label = "(I - Gamma Q)^-1 (I - Gamma)" + (" 1 q^T" if variant == "rank-one" else "")
    elif variant == "rank-one" and np.all(g == g[0]):
        oracle, transient = np.tile(q.entries, (n, 1)), None
        label = "1 q^T (identical susceptibility)"
    else:
        raise ParamOutOfRange("The limit oracle needs an i.i.d. (static) chain")

    worker = partial(_opinion_worker, chain, variant, g, q, u, x0, t_probe, seed)
    counts = _map_trials(worker, trials, workers)["counts"]
    estimate = counts / trials
    return EnsembleReport(
        estimator=f"{variant}-opinion-distribution",
        trials=trials,
        estimate=estimate.tolist(),
        std_err=binomial_std_err(estimate, trials).tolist(),
        oracle=oracle.tolist(),
        oracle_label=label,
        transient_oracle=None if transient is None else transient.tolist(),
        max_abs_deviation=max_abs_deviation(estimate, oracle),
        residual_mass=(1.0 - estimate.sum(axis=1)).tolist(),
        seed=seed,
        details={"t_probe": t_probe},
    )


def _absorption_worker(chain, variant, gamma, q, u, x0, t0, t_max, seed, stop, trials: range) -> dict:
    times = np.zeros(t_max - t0 + 1, dtype=np.int64)
    never = 0
    exits = 0
    for trial in trials:
        stream = RngStream(seed, trial)
        if variant == "fj":
            trajectory = run_fj(chain, gamma, u, x0, t0, t_max, stream, record_cap=0, stop_on_absorption=stop)
        else:
            trajectory = run_rank_one(chain, gamma, q, u, x0, t0, t_max, stream, record_cap=0,
                                      stop_on_absorption=stop)
        exits += trajectory.absorption_exits
        if trajectory.absorption_time is None:
            never += 1
        else:
            times[trajectory.absorption_time - t0] += 1
    return {"times": times, "never": never, "exits": exits}


def absorption_times(
    chain: ChainSource,
    gamma,
    u,
    x0,
    t0: int,
    t_max: int,
    trials: int,
    seed: int,
    variant: Literal["fj", "rank-one"] = "fj",
    q=None,
    workers: int = 1,
    stop_on_absorption: bool = False,
) -> EnsembleReport:
    """
    Fraction of trials whose agents all hold prejudices by t_max, with the
    empirical absorption-time summary. There is no oracle curve.

    With ``stop_on_absorption`` each trial ends once absorbed, so
    exits_after_absorption is only meaningful for full-window runs.
    """
    if variant == "rank-one":
        q = q if isinstance(q, StochasticVector) else StochasticVector(q)
    worker = partial(_absorption_worker, chain, variant, gamma, q, u, x0, t0, t_max, seed, stop_on_absorption)
    tally = _map_trials(worker, trials, workers)
    absorbed = trials - tally["never"]
    fraction = np.array([absorbed / trials])
    details = {"exits_after_absorption": int(tally["exits"]), "absorbed": absorbed}
    if absorbed:
        steps = np.arange(tally["times"].size)
        details["mean_time"] = float(np.dot(steps, tally["times"]) / absorbed)
        details["median_time"] = float(np.searchsorted(np.cumsum(tally["times"]), absorbed / 2.0))
        details["max_time"] = int(np.max(np.nonzero(tally["times"])[0]))
    return EnsembleReport(
        estimator=f"{variant}-absorption",
        trials=trials,
        estimate=fraction.tolist(),
        std_err=binomial_std_err(fraction, trials).tolist(),
        seed=seed,
        details=details,
    )


# Time-reversed chain
def _walk_worker(chain, t_probe, p_inf, t_inf, seed, trials: range) -> dict:
    counts = np.zeros(chain.n, dtype=np.int64)
    for trial in trials:
        walk = run_time_reversed(chain, t_inf, p_inf, RngStream(seed, trial), t_stop=t_probe)
        counts[walk.position(t_probe)] += 1
    return {"counts": counts}


def time_reversed_distribution(
    chain: ChainSource,
    t_probe: int,
    p_inf,
    t_inf: int,
    trials: int,
    seed: int,
    tol: float = APS_TOL,
    workers: int = 1,
) -> EnsembleReport:
    """
    Law of z(t_probe) for walks started at t_inf from p_inf.

    The oracle is psi(t_probe) when the chain looks ergodic from t_probe and
    absent otherwise; ``transient_oracle`` is the exact p_inf^T Q(t_inf:t_probe).
    """
    p_inf = p_inf if isinstance(p_inf, StochasticVector) else StochasticVector(p_inf)
    if not 0 <= t_probe <= t_inf:
        raise ParamOutOfRange(f"Need 0 <= t_probe <= t_inf, got t_probe={t_probe}, t_inf={t_inf}")
    transient = p_inf.entries @ backward_product(chain, t_probe, t_inf).entries
    try:
        oracle = absolute_probability_sequence(chain, t_probe, tol)[0].entries
    except NotErgodicWithinHorizon as e:
        logger.info("no APS oracle at t=%d: %s", t_probe, e)
        oracle = None

    counts = _map_trials(partial(_walk_worker, chain, t_probe, p_inf, t_inf, seed), trials, workers)["counts"]
    estimate = counts / trials
    return EnsembleReport(
        estimator="time-reversed-distribution",
        trials=trials,
        estimate=estimate.tolist(),
        std_err=binomial_std_err(estimate, trials).tolist(),
        oracle=None if oracle is None else oracle.tolist(),
        oracle_label=None if oracle is None else f"absolute probability sequence psi({t_probe})",
        transient_oracle=transient.tolist(),
        max_abs_deviation=None if oracle is None else max_abs_deviation(estimate, oracle),
        seed=seed,
        details={"t_inf": t_inf, "p_inf": p_inf.tolist()},
    )


# Divergence heuristics
def classify_partial_sums(summands, label: str) -> DivergenceDiagnostic:
    """
    Compare the growth of the partial sums over the last decade of the
    horizon, [H/10, H), with the decade before it, [H/100, H/10).

    Near-zero late growth or a late/early ratio at most CONVERGE_RATIO reads
    as converging; a ratio of at least DIVERGE_RATIO (harmonic series give
    about 1, constants about 10) as diverging. This is a trend, not a proof.
    """
    summands = np.asarray(summands, dtype=float)
    if summands.size == 0:
        raise ParamOutOfRange("Need at least one summand")
    partial_sums = np.cumsum(summands)
    horizon = summands.size
    a = max(1, horizon // 100)
    b = max(a + 1, horizon // 10)
    early = float(summands[a:b].sum())
    late = float(summands[b:].sum())
    if late <= ZERO_GROWTH:
        classification = "converging-trend"
    elif early <= ZERO_GROWTH or late / early >= DIVERGE_RATIO:
        classification = "diverging-trend"
    elif late / early <= CONVERGE_RATIO:
        classification = "converging-trend"
    else:
        classification = "inconclusive"
    return DivergenceDiagnostic(
        label=label,
        partial_sums=partial_sums.tolist(),
        early_growth=early,
        late_growth=late,
        classification=classification,
    )


def _subset(S, n: int, allow_full: bool = False) -> np.ndarray:
    S = np.unique(np.asarray(list(S), dtype=np.int64))
    if S.size == 0:
        raise BadSubset("Subset must be nonempty")
    if S[0] < 0 or S[-1] >= n:
        raise BadSubset(f"Subset {S.tolist()} leaves the agent range [0, {n})")
    if not allow_full and S.size == n:
        raise BadSubset("Subset must be a proper subset; its complement is empty")
    return S


def dominance_diagnostic(
    chain: ChainSource,
    S,
    horizon: Optional[int] = None,
) -> tuple[DivergenceDiagnostic, DivergenceDiagnostic]:
    """
    Partial sums of 1^T Q_{S'S}(t) 1 (weight the complement S' puts on S)
    and of 1^T Q_{SS'}(t) 1 (weight S puts on S').
    """
    S = _subset(S, chain.n)
    complement = np.setdiff1d(np.arange(chain.n), S)
    horizon = chain.horizon if horizon is None else min(horizon, chain.horizon)
    into_S = np.empty(horizon)
    out_of_S = np.empty(horizon)
    for t in range(horizon):
        Q = chain.matrix_at(t).entries
        into_S[t] = Q[np.ix_(complement, S)].sum()
        out_of_S[t] = Q[np.ix_(S, complement)].sum()
    return (
        classify_partial_sums(into_S, "complement-to-subset"),
        classify_partial_sums(out_of_S, "subset-to-complement"),
    )


def malleability_diagnostic(gamma_schedule, S, horizon: int, n: Optional[int] = None) -> DivergenceDiagnostic:
    """Partial sums of prod_{i in S} (1 - gamma_i(t))."""
    if n is None:
        probe = np.asarray(gamma_schedule(0) if callable(gamma_schedule) else gamma_schedule, dtype=float)
        if probe.ndim == 0:
            raise ParamOutOfRange("A scalar susceptibility needs the agent count n")
        n = int(probe.shape[-1])
    S = _subset(S, n, allow_full=True)
    gamma_at = susceptibility_schedule(gamma_schedule, n)
    summands = [float(np.prod(1.0 - np.asarray(gamma_at(t), dtype=float)[S])) for t in range(horizon)]
    return classify_partial_sums(summands, "simultaneous-reset")


# Positive correlation lemma
def _lemma_lazy(chain: ChainSource, S, ell: int, t: int, delta: int, prune: float) -> float:
    matrices = [chain.matrix_at(s).entries for s in range(t, t + delta)]
    supports = [[np.nonzero(Q[i] > 0)[0].tolist() for i in range(chain.n)] for Q in matrices]
    memo: dict[tuple[int, frozenset], float] = {}

    def reach(k: int, positions: frozenset) -> float:
        # probability that every lineage in ``positions`` ends at ell through A(t+k-1)...A(t)
        if k == 0:
            return 1.0 if positions == {ell} else 0.0
        key = (k, positions)
        if key in memo:
            return memo[key]
        Q, support = matrices[k - 1], supports[k - 1]
        rows = sorted(positions)
        total = 0.0
        for choice in itertools.product(*(support[i] for i in rows)):
            weight = 1.0
            for i, j in zip(rows, choice):
                weight *= Q[i, j]
            if weight < prune:
                continue
            total += weight * reach(k - 1, frozenset(choice))
        memo[key] = total
        return total

    return reach(delta, frozenset(S))


def _lemma_exhaustive(chain: ChainSource, S, ell: int, t: int, delta: int) -> float:
    n = chain.n
    matrices = [chain.matrix_at(s).entries for s in range(t, t + delta)]
    total = 0.0
    for flat in itertools.product(range(n), repeat=n * delta):
        selections = [flat[k * n:(k + 1) * n] for k in range(delta)]
        weight = 1.0
        for Q, sel in zip(matrices, selections):
            for i, j in enumerate(sel):
                weight *= Q[i, j]
            if weight == 0.0:
                break
        if weight == 0.0:
            continue
        # row i of A(t+delta-1)...A(t): follow the newest selection first
        hit = True
        for i in S:
            position = i
            for sel in reversed(selections):
                position = sel[position]
            if position != ell:
                hit = False
                break
        if hit:
            total += weight
    return total


def verify_correlation_lemma(
    chain: ChainSource,
    S,
    ell: int,
    t: int,
    delta: int,
    prune: float = LEMMA_PRUNE,
    exhaustive: bool = False,
) -> LemmaCheck:
    """
    Exact Pr(row i of A(t+delta:t) selects ell for all i in S) against
    prod_{i in S} Q_{i ell}(t+delta:t).

    The default enumeration follows only the lineages of S, memoized on the
    set of distinct positions; ``exhaustive`` walks every full sequence of
    selection matrices.
    """
    n = chain.n
    S = _subset(S, n, allow_full=True).tolist()
    if not 0 <= ell < n:
        raise ParamOutOfRange(f"ell={ell} outside [0, {n})")
    if delta < 1:
        raise ParamOutOfRange(f"delta must be at least 1, got {delta}")
    if exhaustive:
        if float(n) ** (n * delta) > MAX_EXHAUSTIVE_SEQUENCES:
            raise TooLargeToEnumerate(f"{n}^{n * delta} selection sequences is too many to enumerate")
        lhs = _lemma_exhaustive(chain, S, ell, t, delta)
    else:
        if delta * (2.0 ** n) * float(n) ** n > MAX_LEMMA_STATES:
            raise TooLargeToEnumerate(f"n={n}, delta={delta} exceeds the enumeration budget")
        lhs = _lemma_lazy(chain, S, ell, t, delta, prune)
    product = backward_product(chain, t, t + delta).entries
    rhs = float(np.prod(product[S, ell]))
    return LemmaCheck(n=n, S=S, ell=ell, t=t, delta=delta, lhs=lhs, rhs=rhs, holds=lhs >= rhs - LEMMA_SLACK)


def correlation_lemma_cases(n_max: int, delta_max: int, cases: int, seed: int) -> list[LemmaCheck]:
    """Random (chain, S, ell, t, delta) instances with 2 <= n <= n_max and 1 <= delta <= delta_max."""
    if n_max < 2 or delta_max < 1:
        raise ParamOutOfRange(f"Need n_max >= 2 and delta_max >= 1, got {n_max}, {delta_max}")
    checks = []
    for case in range(cases):
        rng = RngStream(seed, trial=case).generator()
        n = int(rng.integers(2, n_max + 1))
        delta = int(rng.integers(1, delta_max + 1))
        t = int(rng.integers(0, 4))
        chain = random_irreducible_chain(n, t + delta, seed=int(rng.integers(0, 2**63)))
        size = int(rng.integers(1, n + 1))
        S = sorted(rng.choice(n, size=size, replace=False).tolist())
        ell = int(rng.integers(0, n))
        checks.append(verify_correlation_lemma(chain, S, ell, t, delta))
    return checks


def correlation_lemma_sweep(chain: ChainSource, t: int, delta: int) -> list[LemmaCheck]:
    """Every nonempty S and every ell for one chain window."""
    checks = []
    for size in range(1, chain.n + 1):
        for S in itertools.combinations(range(chain.n), size):
            for ell in range(chain.n):
                checks.append(verify_correlation_lemma(chain, S, ell, t, delta))
    return checks


def random_fj_instance(n: int, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """A random stochastic Q (simplex rows) and susceptibilities in [0, 1)."""
    rng = RngStream(seed, trial=index).generator()
    raw = rng.standard_exponential((n, n))
    gamma = rng.random(n)
    return raw / raw.sum(axis=1, keepdims=True), gamma
