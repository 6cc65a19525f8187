"""
Chain families used by the simulations.

Every generated matrix is a pure function of (seed, time index), drawn from
its own counter-based stream, so chains materialize lazily, in any order,
with identical results. Chains can also be described by a short descriptor
(``static:p=0.9,q=0.8``, ``irreducible:n=10``, ``block:n=10``,
``identity:n=3``, ``uniform:n=2``, ``rankone:q=0.3/0.7``, ``file:PATH``)
and saved to or loaded from JSON.
"""

from __future__ import annotations

import json
import logging
from functools import partial
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy.sparse.csgraph import connected_components

from adapt_core import ChainProvenance, ChainSource, StochasticMatrix, StochasticVector, make_stochastic
from adapt_errors import DescriptorError, DimensionError, GenerationFailed, ParamOutOfRange
from adapt_sampling import Channel, RngStream

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 10_000
DEFAULT_HORIZON = 1000
# off-block weight at t = 0
BLOCK_CROSS_SCALE = 1e-6


# Data Models
class GeneratorSpec(BaseModel):
    """Seeded recipe for a chain."""
    kind: Literal["static-two-state", "random-irreducible", "block-nonergodic", "constant-matrix"]
    n: int = Field(ge=1)
    horizon: int = Field(ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    params: dict = Field(default_factory=dict)
    descriptor: Optional[str] = None

    @model_validator(mode="after")
    def _check_kind_params(self) -> "GeneratorSpec":
        if self.kind == "static-two-state":
            if self.n != 2:
                raise ValueError("static-two-state chains have n = 2")
            for name in ("p", "q"):
                value = self.params.get(name)
                if value is None or not 0.0 < float(value) < 1.0:
                    raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
        elif self.kind == "block-nonergodic":
            if self.n % 2 or self.n < 4:
                raise ValueError(f"block-nonergodic chains need an even n >= 4, got {self.n}")
        elif self.kind == "random-irreducible":
            if self.n < 2:
                raise ValueError(f"random-irreducible chains need n >= 2, got {self.n}")
        elif self.kind == "constant-matrix":
            matrix = np.asarray(self.params.get("matrix", []), dtype=float)
            if matrix.shape != (self.n, self.n):
                raise ValueError(f"constant-matrix needs an explicit {self.n}x{self.n} matrix")
        return self


def is_irreducible(Q) -> bool:
    """True iff the support digraph (edge i->j when q_ij > 0) is strongly connected."""
    support = np.asarray(Q) > 0
    count, _ = connected_components(support, directed=True, connection="strong")
    return count == 1


def _simplex_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    # normalized exponentials are uniform on the simplex (flat Dirichlet)
    draws = rng.standard_exponential((n, n))
    return draws / draws.sum(axis=1, keepdims=True)


def _irreducible_block(n: int, seed: int, index: int, channel: Channel) -> np.ndarray:
    for attempt in range(MAX_REJECTIONS):
        rows = _simplex_rows(RngStream(seed, trial=index, time=attempt, channel=channel).generator(), n)
        if is_irreducible(rows):
            if attempt:
                logger.debug("index %d: accepted after %d rejections", index, attempt)
            return rows
    raise GenerationFailed(f"No irreducible {n}x{n} matrix at index {index} after {MAX_REJECTIONS} draws")


def _constant_factory(matrix: StochasticMatrix, t: int) -> StochasticMatrix:
    return matrix


def _irreducible_factory(n: int, seed: int, t: int) -> StochasticMatrix:
    return StochasticMatrix(_irreducible_block(n, seed, t, Channel.GENERATOR))


def cross_block_decay(t: int) -> float:
    """Off-block weight 1/(t+1)^2; summable, and defined at t = 0."""
    return 1.0 / (t + 1) ** 2


def _block_factory(n: int, seed: int, cross_scale: float, t: int) -> StochasticMatrix:
    m = n // 2
    first = _irreducible_block(m, seed, t, Channel.GENERATOR_BLOCK_A)
    second = _irreducible_block(m, seed, t, Channel.GENERATOR_BLOCK_B)
    deltas = RngStream(seed, trial=t, channel=Channel.GENERATOR_CROSS).generator().random((2, m, m))
    weight = cross_scale * cross_block_decay(t)
    raw = np.block([[first, weight * deltas[0]], [weight * deltas[1], second]])
    return make_stochastic(raw)


def _sub_chain_factory(chain: ChainSource, indices: tuple[int, ...], t: int) -> StochasticMatrix:
    block = chain.matrix_at(t).entries[np.ix_(indices, indices)]
    return make_stochastic(block)


def constant_chain(matrix, horizon: int, descriptor: str = "constant") -> ChainSource:
    Q = matrix if isinstance(matrix, StochasticMatrix) else StochasticMatrix(matrix)
    return ChainSource(
        Q.n,
        horizon,
        partial(_constant_factory, Q),
        ChainProvenance(kind="closed-form", descriptor=descriptor, params={"matrix": Q.entries.tolist()}),
    )


def static_two_state_chain(p: float, q: float, horizon: int) -> ChainSource:
    """Every Q(t) = [[p, 1-p], [1-q, q]] with p, q in (0, 1)."""
    if not (0.0 < p < 1.0 and 0.0 < q < 1.0):
        raise ParamOutOfRange(f"p and q must lie in (0, 1), got p={p}, q={q}")
    return constant_chain([[p, 1.0 - p], [1.0 - q, q]], horizon, descriptor=f"static:p={p},q={q}")


def identity_chain(n: int, horizon: int) -> ChainSource:
    return constant_chain(np.eye(n), horizon, descriptor=f"identity:n={n}")


def uniform_chain(n: int, horizon: int) -> ChainSource:
    return constant_chain(np.full((n, n), 1.0 / n), horizon, descriptor=f"uniform:n={n}")


def rank_one_chain(q, horizon: int) -> ChainSource:
    """Every Q(t) = 1 q^T."""
    q = StochasticVector(q)
    label = "/".join(repr(float(v)) for v in q.entries)
    return constant_chain(np.tile(q.entries, (q.n, 1)), horizon, descriptor=f"rankone:q={label}")


def random_irreducible_chain(n: int, horizon: int, seed: int) -> ChainSource:
    """Rows uniform on the simplex, redrawn until the matrix is irreducible."""
    if n < 2 or horizon < 1:
        raise ParamOutOfRange(f"Need n >= 2 and horizon >= 1, got n={n}, horizon={horizon}")
    return ChainSource(
        n,
        horizon,
        partial(_irreducible_factory, n, seed),
        ChainProvenance(kind="generated-with-seed", descriptor=f"irreducible:n={n}", seed=seed,
                        params={"sampler": "flat-dirichlet"}),
    )


def block_nonergodic_chain(n: int, horizon: int, seed: int, cross_scale: float = BLOCK_CROSS_SCALE) -> ChainSource:
    """
    Two irreducible diagonal blocks joined by off-diagonal blocks of weight
    cross_scale/(t+1)^2 times i.i.d. uniform [0,1] entries, rows renormalized.
    """
    if n % 2:
        raise DimensionError(f"Block chains need an even number of agents, got {n}")
    if n < 4:
        raise ParamOutOfRange(f"Block chains need n >= 4, got {n}")
    if cross_scale < 0:
        raise ParamOutOfRange(f"cross_scale must be non-negative, got {cross_scale}")
    descriptor = f"block:n={n}" if cross_scale == BLOCK_CROSS_SCALE else f"block:n={n},scale={cross_scale}"
    return ChainSource(
        n,
        horizon,
        partial(_block_factory, n, seed, cross_scale),
        ChainProvenance(kind="generated-with-seed", descriptor=descriptor, seed=seed,
                        params={"cross": "uniform[0,1]", "decay": "1/(t+1)^2", "scale": cross_scale}),
    )


def extract_block_chain(chain: ChainSource, indices) -> ChainSource:
    """Principal sub-chain on ``indices`` with rows renormalized."""
    indices = tuple(int(i) for i in indices)
    if not indices or len(set(indices)) != len(indices) or not all(0 <= i < chain.n for i in indices):
        raise ParamOutOfRange(f"Invalid block indices {indices} for n={chain.n}")
    return ChainSource(
        len(indices),
        chain.horizon,
        partial(_sub_chain_factory, chain, indices),
        ChainProvenance(kind=chain.provenance.kind, descriptor=f"{chain.provenance.descriptor}[{list(indices)}]",
                        seed=chain.provenance.seed, params={"indices": list(indices)}),
    )


def cross_block_mass(Q: StochasticMatrix, rows, cols) -> float:
    """1^T Q_{rows,cols} 1."""
    return float(Q.entries[np.ix_(list(rows), list(cols))].sum())


def random_susceptibility(n: int, seed: int) -> np.ndarray:
    """Constant susceptibilities uniform on the open interval (0, 1)."""
    rng = RngStream(seed, channel=Channel.SUSCEPTIBILITY_PARAMS).generator()
    gamma = rng.random(n)
    while np.any(gamma == 0.0):
        gamma[gamma == 0.0] = rng.random(int(np.count_nonzero(gamma == 0.0)))
    return gamma


def build_chain(spec: GeneratorSpec) -> ChainSource:
    """Instantiate a GeneratorSpec."""
    if spec.kind == "static-two-state":
        return static_two_state_chain(float(spec.params["p"]), float(spec.params["q"]), spec.horizon)
    if spec.kind == "random-irreducible":
        return random_irreducible_chain(spec.n, spec.horizon, spec.seed)
    if spec.kind == "block-nonergodic":
        scale = float(spec.params.get("scale", BLOCK_CROSS_SCALE))
        return block_nonergodic_chain(spec.n, spec.horizon, spec.seed, scale)
    return constant_chain(spec.params["matrix"], spec.horizon, descriptor=spec.descriptor or "constant")


def _parse_params(body: str) -> dict[str, str]:
    params = {}
    for item in filter(None, (part.strip() for part in body.split(","))):
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise DescriptorError(f"Expected key=value in chain descriptor, got {item!r}")
        params[key.strip()] = value.strip()
    return params


def _number(params: dict[str, str], key: str, kind=float, default=None):
    raw = params.get(key)
    if raw is None:
        if default is None:
            raise DescriptorError(f"Chain descriptor is missing {key}=")
        return default
    try:
        return kind(raw)
    except ValueError:
        raise DescriptorError(f"Chain descriptor parameter {key}={raw!r} is not a {kind.__name__}")


def parse_descriptor(descriptor: str, horizon: int = DEFAULT_HORIZON, seed: int = 0) -> GeneratorSpec:
    """
    Turn a command-line chain descriptor into a GeneratorSpec.

    ``file:PATH`` is not a generator; use :func:`chain_from_descriptor`.
    """
    kind, _, body = descriptor.partition(":")
    params = _parse_params(body)
    try:
        if kind == "static":
            return GeneratorSpec(kind="static-two-state", n=2, horizon=horizon, seed=seed, descriptor=descriptor,
                                 params={"p": _number(params, "p"), "q": _number(params, "q")})
        if kind == "irreducible":
            return GeneratorSpec(kind="random-irreducible", n=_number(params, "n", int), horizon=horizon,
                                 seed=seed, descriptor=descriptor)
        if kind == "block":
            return GeneratorSpec(kind="block-nonergodic", n=_number(params, "n", int), horizon=horizon, seed=seed,
                                 descriptor=descriptor,
                                 params={"scale": _number(params, "scale", float, BLOCK_CROSS_SCALE)})
        if kind in ("identity", "uniform"):
            n = _number(params, "n", int, 2)
            if n < 1:
                raise DescriptorError(f"n must be positive, got {n}")
            matrix = np.eye(n) if kind == "identity" else np.full((n, n), 1.0 / n)
            return GeneratorSpec(kind="constant-matrix", n=n, horizon=horizon, seed=seed, descriptor=descriptor,
                                 params={"matrix": matrix.tolist()})
        if kind == "rankone":
            raw = params.get("q")
            if not raw:
                raise DescriptorError("rankone descriptor needs q=q1/q2/...")
            try:
                q = StochasticVector([float(v) for v in raw.split("/")])
            except ValueError as e:
                raise DescriptorError(f"Bad mutation vector {raw!r}: {e}")
            return GeneratorSpec(kind="constant-matrix", n=q.n, horizon=horizon, seed=seed, descriptor=descriptor,
                                 params={"matrix": np.tile(q.entries, (q.n, 1)).tolist()})
    except ValidationError as e:
        raise DescriptorError(f"Invalid chain descriptor {descriptor!r}: {e.errors()[0]['msg']}")
    raise DescriptorError(f"Unknown chain kind {kind!r} in {descriptor!r}")


def chain_from_descriptor(descriptor: str, horizon: int = DEFAULT_HORIZON, seed: int = 0) -> ChainSource:
    if descriptor.startswith("file:"):
        return load_chain(descriptor[len("file:"):])
    return build_chain(parse_descriptor(descriptor, horizon, seed))


def dump_chain(chain: ChainSource, path: str | Path, materialize: bool = False) -> Path:
    """
    Write a chain as JSON.

    Materialized chains hold {"n", "horizon", "matrices"}; otherwise generated
    and closed-form chains store their descriptor and seed.
    """
    path = Path(path)
    if materialize or chain.provenance.kind == "loaded-from-file":
        document = {
            "n": chain.n,
            "horizon": chain.horizon,
            "matrices": [Q.entries.tolist() for Q in chain.materialize()],
        }
    else:
        document = {"n": chain.n, "horizon": chain.horizon, "provenance": chain.provenance.model_dump()}
    path.write_text(json.dumps(document, indent=1) + "\n", encoding="utf-8", newline="\n")
    return path


def load_chain(path: str | Path) -> ChainSource:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DescriptorError(f"Cannot read chain file {path}: {e}")
    try:
        n, horizon = int(document["n"]), int(document["horizon"])
    except (KeyError, TypeError, ValueError):
        raise DescriptorError(f"Chain file {path} needs integer 'n' and 'horizon'")

    if "matrices" in document:
        matrices = [StochasticMatrix(m) for m in document["matrices"]]
        if len(matrices) != horizon:
            raise DescriptorError(f"Chain file {path} declares horizon {horizon} but holds {len(matrices)} matrices")
        if any(Q.n != n for Q in matrices):
            raise DescriptorError(f"Chain file {path} mixes matrix sizes")
        return ChainSource(n, horizon, matrices.__getitem__,
                           ChainProvenance(kind="loaded-from-file", descriptor=f"file:{path}"))

    try:
        provenance = ChainProvenance.model_validate(document.get("provenance", {}))
    except ValidationError as e:
        raise DescriptorError(f"Chain file {path} has neither matrices nor a valid provenance: {e.errors()[0]['msg']}")
    if provenance.kind == "closed-form" and "matrix" in provenance.params:
        return constant_chain(provenance.params["matrix"], horizon, descriptor=provenance.descriptor)
    chain = chain_from_descriptor(provenance.descriptor, horizon, provenance.seed or 0)
    if chain.n != n:
        raise DescriptorError(f"Chain file {path} declares n={n} but its descriptor builds n={chain.n}")
    return chain
