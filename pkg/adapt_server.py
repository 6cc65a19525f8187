"""
Random Adaptation Lab MCP Server
This server exposes the chain diagnostics, limit oracles and Monte Carlo
estimators as MCP tools over stdio.
"""

import logging
from collections.abc import AsyncIterator
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from mcp.server.fastmcp import Context, FastMCP
from pydantic import BaseModel

from adapt_analysis import (
    APS_TOL,
    EnsembleReport,
    LemmaCheck,
    agreement_distribution,
    fj_limit_matrix,
    rank_one_limit_matrix,
    verify_correlation_lemma,
)
from adapt_core import ChainSource, ErgodicityDiagnostic, absolute_probability_sequence, ergodicity_diagnostic
from adapt_generators import DEFAULT_HORIZON, chain_from_descriptor
from adapt_sampling import RngStream, sample_adaptation

logger = logging.getLogger(__name__)


# Data Models
class AdaptationDraw(BaseModel):
    """One realization A(t): agent i copies agent select[i]."""
    descriptor: str
    t: int
    seed: int
    trial: int
    select: List[int]


class LimitMatrix(BaseModel):
    """Closed-form limit of the prejudiced dynamics."""
    V: List[List[float]]
    row_sum_error: float


class ChainCache:
    """Built chains keyed by (descriptor, horizon, seed)."""

    def __init__(self):
        self._chains: dict[tuple[str, int, int], ChainSource] = {}

    def get(self, descriptor: str, horizon: int = DEFAULT_HORIZON, seed: int = 0) -> ChainSource:
        key = (descriptor, horizon, seed)
        if key not in self._chains:
            logger.debug("building chain %s (H=%d, seed=%d)", descriptor, horizon, seed)
            self._chains[key] = chain_from_descriptor(descriptor, horizon, seed)
        return self._chains[key]

    def __len__(self) -> int:
        return len(self._chains)


@dataclass
class AppContext:
    """Application context with the chain cache."""
    chains: ChainCache = field(default_factory=ChainCache)


@asynccontextmanager
async def app_lifespan(server: FastMCP) -> AsyncIterator[AppContext]:
    """Manage application lifecycle."""
    context = AppContext()
    try:
        yield context
    finally:
        logger.debug("dropping %d cached chains", len(context.chains))


# Create MCP server
mcp = FastMCP("Random Adaptation Lab", lifespan=app_lifespan)


def _chains(ctx: Context) -> ChainCache:
    return ctx.request_context.lifespan_context.chains


# TOOLS - Chain diagnostics
@mcp.tool()
async def ergodicity(
    descriptor: str,
    ctx: Context,
    t0: int = 0,
    tol: float = APS_TOL,
    horizon: int = DEFAULT_HORIZON,
    seed: int = 0,
) -> ErgodicityDiagnostic:
    """
    Check whether the backward products of a chain approach a rank-one matrix.

    Args:
        descriptor: Chain descriptor, e.g. 'static:p=0.9,q=0.8' or 'block:n=10'
        t0: Start time of the backward product
        tol: Largest column spread still counted as rank one
        horizon: Number of matrices in the chain
        seed: Seed for generated chains

    Returns:
        Verdict with the time used, the final spread and the psi estimate
    """
    chain = _chains(ctx).get(descriptor, horizon, seed)
    diagnostic = ergodicity_diagnostic(chain, t0, tol)
    await ctx.info(f"{descriptor}: {diagnostic.verdict} at t={diagnostic.t_used}")
    return diagnostic


@mcp.tool()
async def absolute_probabilities(
    descriptor: str,
    ctx: Context,
    t0: int = 0,
    tol: float = APS_TOL,
    horizon: int = DEFAULT_HORIZON,
    seed: int = 0,
) -> List[List[float]]:
    """
    Absolute probability sequence psi(t0), psi(t0+1), ... up to the anchor time.

    Args:
        descriptor: Chain descriptor
        t0: First time of the sequence
        tol: Rank-one tolerance used to find the anchor
        horizon: Number of matrices in the chain
        seed: Seed for generated chains

    Returns:
        One stochastic vector per time step, starting at t0
    """
    chain = _chains(ctx).get(descriptor, horizon, seed)
    return [psi.tolist() for psi in absolute_probability_sequence(chain, t0, tol)]


@mcp.tool()
async def sample_adaptation_draw(
    descriptor: str,
    t: int,
    ctx: Context,
    seed: int = 0,
    trial: int = 0,
    horizon: int = DEFAULT_HORIZON,
) -> AdaptationDraw:
    """
    Draw the selection matrix A(t) that a given trial would see.

    Args:
        descriptor: Chain descriptor
        t: Time step of the draw
        seed: Master seed (also seeds generated chains)
        trial: Trial index
        horizon: Number of matrices in the chain

    Returns:
        The copied agent for every row
    """
    chain = _chains(ctx).get(descriptor, horizon, seed)
    selection = sample_adaptation(chain.matrix_at(t), RngStream(seed, trial).at(t))
    return AdaptationDraw(descriptor=descriptor, t=t, seed=seed, trial=trial, select=selection.select.tolist())


# TOOLS - Closed-form oracles
@mcp.tool()
def fj_limit(matrix: List[List[float]], gamma: List[float]) -> LimitMatrix:
    """
    Limit matrix V = (I - Gamma Q)^-1 (I - Gamma) of the prejudiced dynamics.

    Args:
        matrix: Row-stochastic matrix Q
        gamma: Susceptibility of every agent, each in [0, 1]

    Returns:
        V, where V[i][j] is the probability that agent i ends on prejudice j
    """
    V = fj_limit_matrix(matrix, gamma)
    return LimitMatrix(V=V.tolist(), row_sum_error=float(np.max(np.abs(V.sum(axis=1) - 1.0))))


@mcp.tool()
def rank_one_limit(matrix: List[List[float]], gamma: List[float], q: List[float]) -> LimitMatrix:
    """
    Limit of the rank-one prejudice dynamics, cross-checked against its series.

    Args:
        matrix: Row-stochastic matrix Q
        gamma: Susceptibility of every agent
        q: Mutation distribution over prejudices

    Returns:
        V = (I - Gamma Q)^-1 (I - Gamma) 1 q^T
    """
    V = rank_one_limit_matrix(matrix, gamma, q)
    return LimitMatrix(V=V.tolist(), row_sum_error=float(np.max(np.abs(V.sum(axis=1) - 1.0))))


# TOOLS - Estimators
@mcp.tool()
async def agreement_distribution_tool(
    descriptor: str,
    x0: List[float],
    ctx: Context,
    trials: int = 1000,
    seed: int = 0,
    t0: int = 0,
    horizon: int = DEFAULT_HORIZON,
) -> EnsembleReport:
    """
    Monte Carlo law of the agreed value against psi(t0).

    Args:
        descriptor: Chain descriptor
        x0: Distinct initial values, one per agent
        trials: Number of independent trials
        seed: Master seed
        t0: Start time
        horizon: Number of matrices in the chain

    Returns:
        Estimate, binomial standard errors and the oracle
    """
    if trials > 100_000:
        raise ValueError(f"At most 100000 trials per call, got {trials}")
    chain = _chains(ctx).get(descriptor, horizon, seed)
    report = agreement_distribution(chain, x0, t0, trials, seed)
    await ctx.info(f"{report.trials} agreeing trials, {report.excluded} excluded, "
                   f"max deviation {report.max_abs_deviation:.4f}")
    return report


@mcp.tool()
async def correlation_lemma(
    descriptor: str,
    S: List[int],
    ell: int,
    t: int,
    delta: int,
    ctx: Context,
    seed: int = 0,
    horizon: int = DEFAULT_HORIZON,
) -> LemmaCheck:
    """
    Exact probability that every agent of S traces back to ell, against the
    product of the corresponding backward-product entries.

    Args:
        descriptor: Chain descriptor
        S: Agent subset
        ell: Common ancestor
        t: Start time
        delta: Product length
        seed: Seed for generated chains
        horizon: Number of matrices in the chain

    Returns:
        Both sides of the inequality and whether it holds
    """
    chain = _chains(ctx).get(descriptor, horizon, seed)
    return verify_correlation_lemma(chain, S, ell, t, delta)


# Resources have no request context
_resource_cache: Optional[ChainCache] = None


def get_cache() -> ChainCache:
    global _resource_cache
    if _resource_cache is None:
        _resource_cache = ChainCache()
    return _resource_cache


# RESOURCES - Chain summaries
@mcp.resource("chain://{descriptor}")
async def get_chain_summary(descriptor: str) -> str:
    """Get a chain summary as formatted text."""
    try:
        chain = get_cache().get(descriptor)
    except ValueError as e:
        return f"Invalid chain descriptor {descriptor}: {e}"

    provenance = chain.provenance
    rows = "\n".join("| " + " | ".join(f"{v:.4f}" for v in row) + " |" for row in chain.matrix_at(0).entries)
    return f"""
# Chain {provenance.descriptor}

- Agents: {chain.n}
- Horizon: {chain.horizon}
- Provenance: {provenance.kind}
- Seed: {provenance.seed}

## Q(0)
{rows}
"""


if __name__ == "__main__":
    # Run the server
    mcp.run()
