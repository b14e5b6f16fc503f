"""Alphabets, PMFs, joint distributions over factored state spaces, and metrics.

Token indices are 0-based. Joint states are length-D integer sequences; the
flat index of a state is ``sum_i x[i] * K**i`` (coordinate 0 varies fastest),
which is also the order used for JSON serialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    AllZeroError,
    NegativeWeightError,
    OutOfAlphabetError,
    SizeGuardError,
    SizeMismatchError,
)

PMF_ATOL = 1e-12
JOINT_ATOL = 1e-10
JOINT_SIZE_CAP = 10**6


@dataclass(frozen=True)
class Alphabet:
    """A token set of size ``k`` with an optional designated mask token."""

    k: int
    mask_token: int | None = None

    def __post_init__(self):
        if self.k < 2:
            raise SizeGuardError(f"alphabet needs at least 2 tokens, got {self.k}")
        if self.mask_token is not None and not 0 <= self.mask_token < self.k:
            raise OutOfAlphabetError(
                f"mask token {self.mask_token} outside [0, {self.k})"
            )

    @property
    def data_tokens(self) -> np.ndarray:
        """Token indices excluding the mask token, if any."""
        tokens = np.arange(self.k)
        if self.mask_token is None:
            return tokens
        return tokens[tokens != self.mask_token]


class Pmf:
    """A probability mass function over K tokens.

    Weights are non-negative, sum to one, and may contain exact zeros
    (a mask source is a delta). Instances are immutable.
    """

    __slots__ = ("weights",)

    def __init__(self, weights: np.ndarray):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise SizeMismatchError("pmf weights must be a 1-d array")
        if np.any(w < 0):
            raise NegativeWeightError("pmf weights must be non-negative")
        if abs(w.sum() - 1.0) > PMF_ATOL * max(1.0, w.size):
            raise AllZeroError(f"pmf weights sum to {w.sum()!r}, not 1")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def __setattr__(self, name, value):
        raise AttributeError("Pmf is immutable")

    def __len__(self) -> int:
        return self.weights.size

    @property
    def k(self) -> int:
        return self.weights.size

    def __getitem__(self, x: int) -> float:
        return float(self.weights[x])

    def __eq__(self, other) -> bool:
        return isinstance(other, Pmf) and np.array_equal(self.weights, other.weights)

    def __repr__(self) -> str:
        return f"Pmf({self.weights.tolist()})"

    @staticmethod
    def uniform(k: int) -> "Pmf":
        return Pmf(np.full(k, 1.0 / k))

    @staticmethod
    def delta(token: int, k: int) -> "Pmf":
        if not 0 <= token < k:
            raise OutOfAlphabetError(f"token {token} outside [0, {k})")
        w = np.zeros(k)
        w[token] = 1.0
        return Pmf(w)

    def to_json(self) -> list[float]:
        return self.weights.tolist()

    @staticmethod
    def from_json(data: Sequence[float]) -> "Pmf":
        return make_pmf(np.asarray(data, dtype=float))


def make_pmf(weights: Iterable[float]) -> Pmf:
    """Normalize non-negative weights into a Pmf.

    Raises NegativeWeightError for negative entries and AllZeroError when the
    total is zero.
    """
    w = np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights,
                   dtype=float)
    if np.any(w < 0):
        raise NegativeWeightError(f"negative weight in {w.tolist()}")
    total = w.sum()
    if total <= 0:
        raise AllZeroError("weights sum to zero")
    return Pmf(w / total)


def tv_distance(a, b) -> float:
    """Total-variation distance, (1/2) sum |a - b|, in [0, 1].

    Accepts Pmf or JointPmf arguments of matching size.
    """
    av = a.weights if isinstance(a, Pmf) else a.table
    bv = b.weights if isinstance(b, Pmf) else b.table
    if av.size != bv.size:
        raise SizeMismatchError(f"pmf sizes differ: {av.size} vs {bv.size}")
    return 0.5 * float(np.abs(av - bv).sum())


def state_index(state: Sequence[int], k: int) -> int:
    """Flat index of a joint state; coordinate 0 is the fastest-varying digit."""
    idx = 0
    for i, x in enumerate(state):
        idx += int(x) * k**i
    return idx


def index_state(idx: int, k: int, dims: int) -> tuple[int, ...]:
    """Inverse of :func:`state_index`."""
    out = []
    for _ in range(dims):
        out.append(idx % k)
        idx //= k
    return tuple(out)


def states_array(k: int, dims: int) -> np.ndarray:
    """All K^D joint states in flat-index order, shape (K^D, D)."""
    n = k**dims
    idx = np.arange(n)
    cols = [(idx // k**i) % k for i in range(dims)]
    return np.stack(cols, axis=1)


class JointPmf:
    """A distribution over K^D joint states, stored as a flat table.

    Entry ``table[i]`` is the probability of the state ``index_state(i, k, d)``.
    Construction is capped at K^D <= 10^6 so exact posteriors and the
    Kolmogorov oracle stay tractable.
    """

    __slots__ = ("k", "dims", "table")

    def __init__(self, k: int, dims: int, table: np.ndarray):
        if dims < 1:
            raise SizeGuardError("dims must be positive")
        if k**dims > JOINT_SIZE_CAP:
            raise SizeGuardError(f"K^D = {k**dims} exceeds cap {JOINT_SIZE_CAP}")
        t = np.asarray(table, dtype=float).reshape(-1)
        if t.size != k**dims:
            raise SizeMismatchError(f"table size {t.size} != {k}^{dims}")
        if np.any(t < 0):
            raise NegativeWeightError("joint table has a negative entry")
        if abs(t.sum() - 1.0) > JOINT_ATOL:
            raise AllZeroError(f"joint table sums to {t.sum()!r}, not 1")
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "table", t)

    def __setattr__(self, name, value):
        raise AttributeError("JointPmf is immutable")

    @property
    def n_states(self) -> int:
        return self.k**self.dims

    def prob(self, state: Sequence[int]) -> float:
        return float(self.table[state_index(state, self.k)])

    def nd(self) -> np.ndarray:
        """Table reshaped to (K,)*D with axis i indexing coordinate i."""
        # flat order has coordinate 0 fastest, i.e. Fortran order over (K,)*D
        return self.table.reshape((self.k,) * self.dims, order="F")

    def support(self) -> np.ndarray:
        """States with positive probability, shape (n, D)."""
        return states_array(self.k, self.dims)[self.table > 0]

    def coordinate_marginal(self, i: int) -> Pmf:
        axes = tuple(j for j in range(self.dims) if j != i)
        return Pmf(self.nd().sum(axis=axes))

    def to_json(self) -> dict:
        return {"k": self.k, "dims": self.dims, "table": self.table.tolist()}

    @staticmethod
    def from_json(data: dict) -> "JointPmf":
        return JointPmf(int(data["k"]), int(data["dims"]),
                        np.asarray(data["table"], dtype=float))

    @staticmethod
    def from_nd(table_nd: np.ndarray) -> "JointPmf":
        k = table_nd.shape[0]
        dims = table_nd.ndim
        return JointPmf(k, dims, np.asarray(table_nd).flatten(order="F"))


def empirical_joint(samples: Sequence[Sequence[int]], dims: int,
                    alphabet: Alphabet) -> JointPmf:
    """Normalized histogram of joint states over the K^D cells."""
    arr = np.asarray(samples, dtype=int)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.shape[1] != dims:
        raise SizeMismatchError(f"samples have {arr.shape[1]} coordinates, not {dims}")
    if arr.size and (arr.min() < 0 or arr.max() >= alphabet.k):
        raise OutOfAlphabetError("sample token outside [0, K)")
    k = alphabet.k
    flat = (arr * (k ** np.arange(dims))).sum(axis=1)
    counts = np.bincount(flat, minlength=k**dims).astype(float)
    total = counts.sum()
    if total == 0:
        raise AllZeroError("no samples")
    return JointPmf(k, dims, counts / total)


@dataclass(frozen=True)
class Metric:
    """A per-token dissimilarity with dist(x, x1) = 0 iff x = x1.

    Symmetry and the triangle inequality are not required.
    """

    dist: Callable[[int, int], float]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def matrix(self, k: int) -> np.ndarray:
        """Dense (K, K) matrix with entry [x, x1] = dist(x, x1); validated."""
        if k not in self._cache:
            m = np.array([[float(self.dist(x, x1)) for x1 in range(k)]
                          for x in range(k)])
            if np.any(m < 0):
                raise NegativeWeightError("metric distances must be non-negative")
            if np.any(np.diagonal(m) != 0):
                raise SizeMismatchError("metric must satisfy dist(x, x) = 0")
            off = m + np.eye(k)
            if np.any(off <= 0):
                raise SizeMismatchError("metric must be positive off the diagonal")
            m.flags.writeable = False
            self._cache[k] = m
        return self._cache[k]


def absolute_metric() -> Metric:
    """The |x - x1| token metric used for ordinal alphabets."""
    return Metric(lambda x, x1: abs(x - x1))
