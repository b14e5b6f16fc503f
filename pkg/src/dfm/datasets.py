"""Toy discrete targets providing joint PMFs and sample streams.

All generators are deterministic per seed. When the alphabet carries a mask
token, targets put zero mass on states containing it, so the mask stays a
pure source symbol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Alphabet, JointPmf, states_array
from .errors import ConfigError, SizeGuardError


@dataclass(frozen=True)
class ToySpec:
    """Recipe for a toy joint target distribution."""

    kind: str
    k: int
    dims: int
    seed: int = 0
    sparsity: float = 0.25
    transition: object = None  # markov_chain: "identity" or a row-stochastic matrix
    mask_token: int | None = None

    def alphabet(self) -> Alphabet:
        return Alphabet(self.k, self.mask_token)


def _data_tokens(spec: ToySpec) -> np.ndarray:
    tokens = np.arange(spec.k)
    if spec.mask_token is not None:
        tokens = tokens[tokens != spec.mask_token]
    return tokens


def make_toy(spec: ToySpec) -> JointPmf:
    """Build the joint target described by the recipe."""
    if spec.k**spec.dims > 10**6:
        raise SizeGuardError(f"K^D = {spec.k**spec.dims} too large")
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    tokens = _data_tokens(spec)
    table = np.zeros((spec.k,) * spec.dims)

    if spec.kind == "two_token_checker":
        if tokens.size < 2:
            raise ConfigError("checker target needs two data tokens")
        a, b = int(tokens[0]), int(tokens[1])
        even = tuple(a if i % 2 == 0 else b for i in range(spec.dims))
        odd = tuple(b if i % 2 == 0 else a for i in range(spec.dims))
        table[even] += 0.5
        table[odd] += 0.5
    elif spec.kind == "random_sparse":
        cells = states_array(spec.k, spec.dims)
        ok = np.all(np.isin(cells, tokens), axis=1)
        pool = np.flatnonzero(ok)
        n_cells = int(np.ceil(spec.sparsity * spec.k**spec.dims))
        n_cells = min(n_cells, pool.size)
        chosen = rng.choice(pool, size=n_cells, replace=False)
        weights = rng.dirichlet(np.ones(n_cells))
        flat = np.zeros(spec.k**spec.dims)
        flat[chosen] = weights
        return JointPmf(spec.k, spec.dims, flat)
    elif spec.kind == "markov_chain":
        n = tokens.size
        if spec.transition is None:
            trans = rng.dirichlet(np.ones(n), size=n)
        elif isinstance(spec.transition, str) and spec.transition == "identity":
            trans = np.eye(n)
        else:
            trans = np.asarray(spec.transition, dtype=float)
            if trans.shape != (n, n) or np.any(trans < 0) \
                    or not np.allclose(trans.sum(axis=1), 1.0, atol=1e-9):
                raise ConfigError("transition must be row-stochastic over data tokens")
        # q over data-token indices: q(x) = start(x_0) prod_j trans(x_j, x_{j+1})
        start = rng.dirichlet(np.ones(n))
        sub = start
        for _ in range(spec.dims - 1):
            sub = sub[..., None] * trans
        table[np.ix_(*([tokens] * spec.dims))] = sub
    else:
        raise ConfigError(f"unknown toy kind {spec.kind!r}")
    return JointPmf.from_nd(table)


def sample_target(q: JointPmf, n: int, seed: int = 0) -> np.ndarray:
    """n i.i.d. joint states from q, shape (n, D)."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    flat = rng.choice(q.n_states, size=n, p=q.table)
    return np.stack([(flat // q.k**i) % q.k for i in range(q.dims)], axis=1)
