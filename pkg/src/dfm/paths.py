"""Schedulers, source distributions, and conditional probability paths.

A conditional path evaluates p_t(x | x1) over one alphabet together with its
exact time derivative. Three families are provided: mixture paths driven by a
scheduler, softmax paths driven by a token metric and a sharpness schedule,
and the spherical-geodesic path between two arbitrary PMFs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Alphabet, Metric, Pmf
from .errors import (
    BetaOverflowError,
    DegeneratePathError,
    SchedulerSingularityError,
    ZeroStatisticError,
)

# below this angle the sine ratios in the source-dependent scheduler lose
# precision; switch to the second-order limit kappa = 1 - (1-t)^2
_SMALL_ANGLE = 1e-4

_EXP_MAX = 745.0  # log of the largest finite double, with margin


class Scheduler:
    """Interpolation weight kappa_t(x1) with kappa_0 = 0 and kappa_1 = 1.

    ``kappa_dot`` is the analytic time derivative; ``rate`` is the jump
    intensity kappa_dot / (1 - kappa), which diverges at t = 1.
    """

    kind: str = "base"
    token_independent: bool = True

    def kappa(self, t: float, x1: int | None = None) -> float:
        raise NotImplementedError

    def kappa_dot(self, t: float, x1: int | None = None) -> float:
        raise NotImplementedError

    def kappa_vec(self, t: float, k: int) -> np.ndarray:
        return np.full(k, self.kappa(t))

    def kappa_dot_vec(self, t: float, k: int) -> np.ndarray:
        return np.full(k, self.kappa_dot(t))

    def rate(self, t: float, x1: int | None = None) -> float:
        kap = self.kappa(t, x1)
        if kap >= 1.0:
            raise SchedulerSingularityError(f"kappa = 1 at t = {t}")
        return self.kappa_dot(t, x1) / (1.0 - kap)

    def rate_vec(self, t: float, k: int) -> np.ndarray:
        kap = self.kappa_vec(t, k)
        if np.any(kap >= 1.0):
            raise SchedulerSingularityError(f"kappa = 1 at t = {t}")
        return self.kappa_dot_vec(t, k) / (1.0 - kap)


class LinearScheduler(Scheduler):
    kind = "linear"

    def kappa(self, t, x1=None):
        return float(t)

    def kappa_dot(self, t, x1=None):
        return 1.0


class CubicScheduler(Scheduler):
    kind = "cubic"

    def kappa(self, t, x1=None):
        return float(t) ** 3

    def kappa_dot(self, t, x1=None):
        return 3.0 * float(t) ** 2


class KineticOptimalScheduler(Scheduler):
    """Source-dependent scheduler minimizing the path's kinetic energy.

    For each target token the weight is kappa_t = 1 - sin^2((1-t) W) / sin^2 W
    with W = arccos sqrt(p(x1)). A zero-probability token gives W = pi/2 and
    kappa_t = sin^2(pi t / 2); W below 1e-4 uses the limit 1 - (1-t)^2.
    """

    kind = "kinetic_optimal"
    token_independent = False

    def __init__(self, source: Pmf):
        self.source = source
        self.omega = np.arccos(np.sqrt(np.clip(source.weights, 0.0, 1.0)))

    def _kappa_omega(self, t: float, omega: np.ndarray) -> np.ndarray:
        t = float(t)
        small = omega < _SMALL_ANGLE
        om = np.where(small, 1.0, omega)
        kap = 1.0 - np.sin((1.0 - t) * om) ** 2 / np.sin(om) ** 2
        return np.where(small, 1.0 - (1.0 - t) ** 2, kap)

    def _kappa_dot_omega(self, t: float, omega: np.ndarray) -> np.ndarray:
        t = float(t)
        small = omega < _SMALL_ANGLE
        om = np.where(small, 1.0, omega)
        dot = om * np.sin(2.0 * (1.0 - t) * om) / np.sin(om) ** 2
        return np.where(small, 2.0 * (1.0 - t), dot)

    def kappa(self, t, x1=None):
        if x1 is None:
            raise SchedulerSingularityError("source-dependent scheduler needs x1")
        return float(self._kappa_omega(t, self.omega[x1:x1 + 1])[0])

    def kappa_dot(self, t, x1=None):
        if x1 is None:
            raise SchedulerSingularityError("source-dependent scheduler needs x1")
        return float(self._kappa_dot_omega(t, self.omega[x1:x1 + 1])[0])

    def kappa_vec(self, t, k):
        assert k == len(self.source)
        return self._kappa_omega(t, self.omega)

    def kappa_dot_vec(self, t, k):
        assert k == len(self.source)
        return self._kappa_dot_omega(t, self.omega)

    def _kappa_omega_batch(self, ts: np.ndarray, x1s: np.ndarray) -> np.ndarray:
        """kappa at paired (t, x1) arrays, used by batched samplers."""
        om = self.omega[np.asarray(x1s, dtype=int)]
        ts = np.asarray(ts, dtype=float)
        small = om < _SMALL_ANGLE
        om_safe = np.where(small, 1.0, om)
        kap = 1.0 - np.sin((1.0 - ts) * om_safe) ** 2 / np.sin(om_safe) ** 2
        return np.where(small, 1.0 - (1.0 - ts) ** 2, kap)


def scheduler_kinetic_optimal(source: Pmf) -> KineticOptimalScheduler:
    """Scheduler whose mixture path is the kinetic-energy minimizer."""
    return KineticOptimalScheduler(source)


def make_scheduler(kind: str, source: Pmf | None = None) -> Scheduler:
    if kind == "linear":
        return LinearScheduler()
    if kind == "cubic":
        return CubicScheduler()
    if kind == "kinetic_optimal":
        if source is None:
            raise SchedulerSingularityError("kinetic_optimal scheduler needs a source")
        return KineticOptimalScheduler(source)
    raise ValueError(f"unknown scheduler kind {kind!r}")


@dataclass(frozen=True)
class BetaSchedule:
    """Monotone sharpness schedule beta_t = c (t / (1-t))^a, beta_0 = 0."""

    c: float = 1.0
    a: float = 1.0

    def __post_init__(self):
        if self.c <= 0 or self.a <= 0:
            raise ValueError("beta schedule needs c > 0 and a > 0")

    def beta(self, t: float) -> float:
        t = float(t)
        if t <= 0:
            return 0.0
        if t >= 1:
            return math.inf
        return self.c * (t / (1.0 - t)) ** self.a

    def beta_dot(self, t: float) -> float:
        t = float(t)
        if t <= 0:
            return 0.0 if self.a > 1 else (self.c if self.a == 1 else math.inf)
        if t >= 1:
            return math.inf
        return self.c * self.a * (t / (1.0 - t)) ** (self.a - 1.0) / (1.0 - t) ** 2


class ConditionalPath:
    """Evaluator for p_t(x | x1) and its exact time derivative.

    ``pmf(t, x1)`` is a valid Pmf for every (t, x1); ``dpmf(t, x1)`` sums to
    zero. At t = 0 the path equals its source, at t = 1 the delta at x1.
    """

    family: str = "base"

    def __init__(self, alphabet: Alphabet):
        self.alphabet = alphabet

    @property
    def k(self) -> int:
        return self.alphabet.k

    def pmf(self, t: float, x1: int) -> Pmf:
        raise NotImplementedError

    def dpmf(self, t: float, x1: int) -> np.ndarray:
        raise NotImplementedError

    def conditional_matrix(self, t: float) -> np.ndarray:
        """Matrix M[x, x1] = p_t(x | x1) over all target tokens."""
        return np.stack([self.pmf(t, x1).weights for x1 in range(self.k)], axis=1)

    def source_pmf(self) -> Pmf:
        raise NotImplementedError

    def sample(self, t: float, x1: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.k, p=self.pmf(t, x1).weights))


class MixturePath(ConditionalPath):
    """p_t(x | x1) = (1 - kappa_t(x1)) p(x) + kappa_t(x1) delta_{x1}(x)."""

    family = "mixture"

    def __init__(self, source: Pmf, scheduler: Scheduler,
                 alphabet: Alphabet | None = None):
        super().__init__(alphabet or Alphabet(len(source)))
        if len(source) != self.alphabet.k:
            raise ValueError("source size does not match alphabet")
        self.source = source
        self.scheduler = scheduler

    def pmf(self, t, x1):
        kap = self.scheduler.kappa(t, x1)
        w = (1.0 - kap) * self.source.weights.copy()
        w[x1] += kap
        return Pmf(w)

    def dpmf(self, t, x1):
        dkap = self.scheduler.kappa_dot(t, x1)
        d = -dkap * self.source.weights.copy()
        d[x1] += dkap
        return d

    def conditional_matrix(self, t):
        kap = self.scheduler.kappa_vec(t, self.k)
        return (1.0 - kap)[None, :] * self.source.weights[:, None] + np.diag(kap)

    def conditional_matrix_dot(self, t):
        dkap = self.scheduler.kappa_dot_vec(t, self.k)
        return -dkap[None, :] * self.source.weights[:, None] + np.diag(dkap)

    def source_pmf(self):
        return self.source


class MetricPath(ConditionalPath):
    """p_t(x | x1) = softmax(-beta_t dist(x, x1)) with exact delta at t = 1.

    The softmax subtracts the maximal exponent (attained at x = x1, where the
    distance is zero), so large beta underflows gracefully toward the delta.
    """

    family = "metric"

    def __init__(self, metric: Metric, beta: BetaSchedule, alphabet: Alphabet):
        super().__init__(alphabet)
        self.metric = metric
        self.beta = beta
        self.dist = metric.matrix(alphabet.k)

    def _weights(self, t: float, x1: int) -> np.ndarray:
        if t >= 1.0:
            w = np.zeros(self.k)
            w[x1] = 1.0
            return w
        b = self.beta.beta(t)
        d = self.dist[:, x1]
        if not math.isfinite(b) or b * float(d.max()) > 1e306:
            raise BetaOverflowError(
                f"beta_t = {b!r} at t = {t} exceeds the exponent range; "
                "evaluate at t <= 1 - eps")
        logits = -b * d  # max exponent is 0 at x = x1
        e = np.exp(logits)
        return e / e.sum()

    def pmf(self, t, x1):
        return Pmf(self._weights(t, x1))

    def dpmf(self, t, x1):
        if t >= 1.0:
            raise BetaOverflowError("derivative undefined at t = 1; use t <= 1 - eps")
        w = self._weights(t, x1)
        d = self.dist[:, x1]
        bdot = self.beta.beta_dot(t)
        return w * bdot * (float(w @ d) - d)

    def conditional_matrix(self, t):
        if t >= 1.0:
            return np.eye(self.k)
        b = self.beta.beta(t)
        if not math.isfinite(b) or b * float(self.dist.max()) > 1e306:
            raise BetaOverflowError(f"beta_t = {b!r} at t = {t}")
        e = np.exp(-b * self.dist)
        return e / e.sum(axis=0, keepdims=True)

    def source_pmf(self):
        return Pmf.uniform(self.k)


class GeodesicBridge:
    """Spherical-geodesic probability path between two general PMFs.

    In square-root coordinates a_t(x) = sqrt(p_t(x)) the path is the great
    circle from sqrt(p) to sqrt(q); sum_x a_t(x)^2 = 1 for all t. When the
    target is a delta this coincides with the mixture path under the
    source-dependent kinetic-optimal scheduler.
    """

    family = "geodesic"

    def __init__(self, source: Pmf, target: Pmf):
        if len(source) != len(target):
            raise ValueError("endpoint sizes differ")
        self.source = source
        self.target = target
        self.sqrt_p = np.sqrt(source.weights)
        self.sqrt_q = np.sqrt(target.weights)
        cos_omega = float(np.clip(self.sqrt_p @ self.sqrt_q, -1.0, 1.0))
        self.omega = math.acos(cos_omega)
        if self.omega < 1e-10:
            raise DegeneratePathError("endpoints coincide; geodesic undefined")

    @property
    def k(self) -> int:
        return len(self.source)

    def amplitude(self, t: float) -> np.ndarray:
        om, s = self.omega, math.sin(self.omega)
        return (math.sin((1.0 - t) * om) / s) * self.sqrt_p \
            + (math.sin(t * om) / s) * self.sqrt_q

    def amplitude_dot(self, t: float) -> np.ndarray:
        om, s = self.omega, math.sin(self.omega)
        return (-om * math.cos((1.0 - t) * om) / s) * self.sqrt_p \
            + (om * math.cos(t * om) / s) * self.sqrt_q

    def pmf(self, t: float) -> Pmf:
        a = self.amplitude(t)
        return Pmf(a * a)

    def dpmf(self, t: float) -> np.ndarray:
        return 2.0 * self.amplitude(t) * self.amplitude_dot(t)


def ko_path(source: Pmf, target: Pmf) -> GeodesicBridge:
    """Kinetic-optimal path between two PMFs (the spherical geodesic)."""
    return GeodesicBridge(source, target)


def tempered_source(token_stats: Pmf, beta0: float) -> Pmf:
    """Single-parameter source family p(x) = softmax(-beta0 log p_stats(x)).

    beta0 = -1 recovers the statistics, beta0 = 0 the uniform distribution;
    large beta0 concentrates on the least probable tokens.
    """
    stats = token_stats.weights
    if np.any(stats <= 0):
        raise ZeroStatisticError("token statistics must be strictly positive")
    logits = -beta0 * np.log(stats)
    logits -= logits.max()
    e = np.exp(logits)
    return Pmf(e / e.sum())


def mixture_path(source: Pmf, scheduler: Scheduler,
                 alphabet: Alphabet | None = None) -> MixturePath:
    return MixturePath(source, scheduler, alphabet)


def metric_path(metric: Metric, beta: BetaSchedule, alphabet: Alphabet) -> MetricPath:
    return MetricPath(metric, beta, alphabet)


def mask_mixture_path(alphabet: Alphabet, scheduler: Scheduler | None = None) -> MixturePath:
    """Mixture path whose source is the delta at the alphabet's mask token."""
    if alphabet.mask_token is None:
        raise ValueError("alphabet has no mask token")
    source = Pmf.delta(alphabet.mask_token, alphabet.k)
    return MixturePath(source, scheduler or LinearScheduler(), alphabet)
