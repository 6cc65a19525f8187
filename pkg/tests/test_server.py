"""
test_server.py - Exercise the MCP tools and resources
Tools are called directly with a stand-in request context, and once
through an in-memory client session.
"""

import asyncio
from types import SimpleNamespace

import numpy as np
import pytest

from adapt_errors import DescriptorError, NotErgodicWithinHorizon
from adapt_server import (
    AppContext,
    ChainCache,
    absolute_probabilities,
    agreement_distribution_tool,
    correlation_lemma,
    ergodicity,
    fj_limit,
    get_chain_summary,
    mcp,
    rank_one_limit,
    sample_adaptation_draw,
)

STATIC = "static:p=0.9,q=0.8"


class FakeContext:
    def __init__(self):
        self.request_context = SimpleNamespace(lifespan_context=AppContext())
        self.messages = []

    async def info(self, message):
        self.messages.append(message)


@pytest.fixture
def ctx():
    return FakeContext()


def test_chain_cache_reuses_chains():
    cache = ChainCache()
    first = cache.get("irreducible:n=3", 20, 4)
    assert cache.get("irreducible:n=3", 20, 4) is first
    assert cache.get("irreducible:n=3", 20, 5) is not first
    assert len(cache) == 2
    with pytest.raises(DescriptorError):
        cache.get("spiral:n=3")


def test_ergodicity_tool(ctx):
    diagnostic = asyncio.run(ergodicity(STATIC, ctx, horizon=200))
    assert diagnostic.verdict == "rank-one-within-tol"
    assert diagnostic.psi_estimate == pytest.approx([2 / 3, 1 / 3], abs=1e-8)
    assert ctx.messages and STATIC in ctx.messages[0]

    diagnostic = asyncio.run(ergodicity("identity:n=3", ctx, horizon=50))
    assert diagnostic.verdict == "not-rank-one"


def test_absolute_probabilities_tool(ctx):
    sequence = asyncio.run(absolute_probabilities(STATIC, ctx, horizon=200))
    assert sequence[0] == pytest.approx([2 / 3, 1 / 3], abs=1e-8)
    assert all(sum(psi) == pytest.approx(1.0) for psi in sequence)
    with pytest.raises(NotErgodicWithinHorizon):
        asyncio.run(absolute_probabilities("identity:n=2", ctx, horizon=50))


def test_sample_adaptation_draw_is_reproducible(ctx):
    a = asyncio.run(sample_adaptation_draw("irreducible:n=5", 3, ctx, seed=11, trial=2, horizon=10))
    b = asyncio.run(sample_adaptation_draw("irreducible:n=5", 3, ctx, seed=11, trial=2, horizon=10))
    assert a.select == b.select
    assert len(a.select) == 5 and all(0 <= s < 5 for s in a.select)
    identity = asyncio.run(sample_adaptation_draw("identity:n=4", 0, ctx, horizon=10))
    assert identity.select == [0, 1, 2, 3]


def test_limit_tools():
    result = fj_limit([[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5])
    assert np.allclose(result.V, [[0.75, 0.25], [0.25, 0.75]])
    assert result.row_sum_error < 1e-12

    q = [0.2, 0.3, 0.5]
    result = rank_one_limit(np.full((3, 3), 1 / 3).tolist(), [0.4, 0.6, 0.8], q)
    assert np.allclose(result.V, [q] * 3)


def test_agreement_tool(ctx):
    report = asyncio.run(agreement_distribution_tool(STATIC, [1.0, 2.0], ctx, trials=500, seed=3, horizon=300))
    assert report.oracle == pytest.approx([2 / 3, 1 / 3], abs=1e-8)
    assert report.within(5.0)
    with pytest.raises(ValueError):
        asyncio.run(agreement_distribution_tool(STATIC, [1.0, 2.0], ctx, trials=200_000))


def test_correlation_lemma_tool(ctx):
    check = asyncio.run(correlation_lemma("irreducible:n=3", [0, 1], 2, 0, 2, ctx, seed=5, horizon=5))
    assert check.holds
    assert check.lhs >= check.rhs - 1e-15
    base = asyncio.run(correlation_lemma("irreducible:n=3", [0, 1], 2, 0, 1, ctx, seed=5, horizon=5))
    assert base.lhs == pytest.approx(base.rhs, abs=1e-14)


def test_chain_resource():
    text = asyncio.run(get_chain_summary(STATIC))
    assert "# Chain static:p=0.9,q=0.8" in text
    assert "- Agents: 2" in text
    assert "| 0.9000 | 0.1000 |" in text
    assert asyncio.run(get_chain_summary("spiral:n=3")).startswith("Invalid chain descriptor")


def test_tools_over_client_session():
    from mcp.shared.memory import create_connected_server_and_client_session

    async def call():
        async with create_connected_server_and_client_session(mcp._mcp_server) as session:
            tools = await session.list_tools()
            names = {tool.name for tool in tools.tools}
            result = await session.call_tool("fj_limit", {"matrix": [[0.5, 0.5], [0.5, 0.5]], "gamma": [0.5, 0.5]})
            return names, result

    names, result = asyncio.run(call())
    assert {"ergodicity", "fj_limit", "rank_one_limit", "correlation_lemma"} <= names
    assert not result.isError
    assert np.allclose(result.structuredContent["V"], [[0.75, 0.25], [0.25, 0.75]])
