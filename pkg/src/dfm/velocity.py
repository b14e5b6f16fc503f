"""Flux and rate-matrix algebra.

A flux j(x, z) is mass per unit time moving z -> x; a rate matrix u(x, z)
holds jump intensities with non-negative off-diagonals and zero column sums.
This module provides the discrete divergence, flux-to-velocity conversion,
the weighted-Laplacian potential solve with its closed form, the closed-form
flux families, per-family conditional velocities, divergence-free corrector
fluxes, and posterior-weighted marginal velocities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Alphabet, Pmf
from .errors import (
    AlphaOutOfRangeError,
    AsymmetricWeightError,
    DivideByZeroTauError,
    InconsistentRHSError,
    SingularSystemError,
    UnsafeFluxError,
)
from .paths import ConditionalPath, MetricPath, MixturePath, Scheduler

RATE_ATOL = 1e-10
_NEG_FUZZ = 1e-12


class Flux:
    """A K x K flux array with zero diagonal and non-negative off-diagonals."""

    __slots__ = ("mat",)

    def __init__(self, mat: np.ndarray):
        m = np.asarray(mat, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("flux must be square")
        if np.any(np.diagonal(m) != 0):
            raise ValueError("flux diagonal must be zero")
        if m.min() < -_NEG_FUZZ:
            raise ValueError(f"negative flux entry {m.min()!r}")
        object.__setattr__(self, "mat", m)

    def __setattr__(self, name, value):
        raise AttributeError("Flux is immutable")

    @property
    def k(self) -> int:
        return self.mat.shape[0]

    def is_safe(self, p: Pmf | np.ndarray) -> bool:
        """No flux leaves a zero-probability state."""
        w = p.weights if isinstance(p, Pmf) else np.asarray(p, dtype=float)
        return not np.any(self.mat[:, w == 0] > 0)

    def to_json(self) -> list[list[float]]:
        return self.mat.tolist()


class RateMatrix:
    """A K x K velocity field satisfying the rate conditions."""

    __slots__ = ("mat",)

    def __init__(self, mat: np.ndarray, atol: float = RATE_ATOL):
        m = np.asarray(mat, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("rate matrix must be square")
        off = m[~np.eye(m.shape[0], dtype=bool)]
        if off.size and off.min() < -_NEG_FUZZ:
            raise ValueError(f"negative off-diagonal rate {off.min()!r}")
        col = m.sum(axis=0)
        if np.abs(col).max() > atol:
            raise ValueError(f"column sums not zero: max |sum| = {np.abs(col).max()!r}")
        object.__setattr__(self, "mat", m)

    def __setattr__(self, name, value):
        raise AttributeError("RateMatrix is immutable")

    @property
    def k(self) -> int:
        return self.mat.shape[0]

    def column(self, z: int) -> np.ndarray:
        return self.mat[:, z]

    def to_json(self) -> list[list[float]]:
        return self.mat.tolist()


@dataclass(frozen=True)
class WeightSpec:
    """Kinetic-energy weighting w(x, z) = p(z) / (tau(x) tau(z)).

    ``tau`` maps the current probabilities to non-negative reweights and must
    vanish wherever p does, so no energy budget is assigned to flux leaving an
    empty state. ``power(1)`` is the numerically stable choice w = 1/p(x).
    """

    kind: str
    alpha: float | None = None
    tau_fn: Callable[[np.ndarray], np.ndarray] | None = None

    @staticmethod
    def indicator() -> "WeightSpec":
        return WeightSpec("tau_indicator")

    @staticmethod
    def power(alpha: float) -> "WeightSpec":
        if alpha < 1:
            raise AlphaOutOfRangeError(f"power weight needs alpha >= 1, got {alpha}")
        return WeightSpec("tau_power", alpha=alpha)

    @staticmethod
    def stable() -> "WeightSpec":
        return WeightSpec.power(1.0)

    @staticmethod
    def power_inf() -> "WeightSpec":
        return WeightSpec("tau_power_inf")

    @staticmethod
    def custom(tau_fn: Callable[[np.ndarray], np.ndarray]) -> "WeightSpec":
        return WeightSpec("custom_tau", tau_fn=tau_fn)

    def tau(self, p: Pmf | np.ndarray) -> np.ndarray:
        w = p.weights if isinstance(p, Pmf) else np.asarray(p, dtype=float)
        if self.kind == "tau_indicator":
            t = (w > 0).astype(float)
        elif self.kind == "tau_power":
            t = w**self.alpha
        elif self.kind == "tau_power_inf":
            t = np.zeros_like(w)
            t[int(np.argmax(w))] = 1.0  # ties broken by lowest index
        elif self.kind == "custom_tau":
            t = np.asarray(self.tau_fn(w), dtype=float)
        else:
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if np.any((w == 0) & (t != 0)):
            raise UnsafeFluxError("weight is not safe: tau > 0 where p = 0")
        return t

    def rho(self, p: Pmf | np.ndarray) -> np.ndarray:
        """rho(x, z) = p(z) / w(x, z) = tau(x) tau(z), always symmetric."""
        t = self.tau(p)
        return np.outer(t, t)


def divergence(j: Flux) -> np.ndarray:
    """Per-state net outgoing flux; entries sum to zero exactly."""
    return j.mat.sum(axis=0) - j.mat.sum(axis=1)


def velocity_from_flux(j: Flux, p: Pmf, unsafe: str = "error") -> RateMatrix:
    """Convert a flux to a velocity, u(x, z) = j(x, z) / p(z) where p(z) > 0.

    Columns with p(z) = 0 must carry no flux; ``unsafe="error"`` (default)
    raises UnsafeFluxError when they do, while ``unsafe="zero"`` silently zeroes
    them, reproducing the literal conversion rule. Diagonals are set so every
    column sums to zero.
    """
    w = p.weights
    m = j.mat
    zero_cols = w == 0
    if np.any(m[:, zero_cols] > 0):
        if unsafe == "error":
            bad = int(np.flatnonzero(zero_cols & (m.sum(axis=0) > 0))[0])
            raise UnsafeFluxError(
                f"flux leaves zero-probability state {bad}; p({bad}) = 0")
        if unsafe != "zero":
            raise ValueError(f"unknown unsafe mode {unsafe!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(w[None, :] > 0, m / w[None, :], 0.0)
    np.fill_diagonal(u, 0.0)
    np.fill_diagonal(u, -u.sum(axis=0))
    return RateMatrix(u)


def laplacian_solve(p: Pmf, dp: np.ndarray, w: WeightSpec) -> np.ndarray:
    """Solve sum_z rho(x, z) (f(x) - f(z)) = dp(x) for the potential f.

    The system is a weighted graph Laplacian with a constant kernel; the gauge
    is fixed by sum_x f(x) = 0 through a bordered direct solve. Requires p > 0
    entrywise and sum(dp) = 0.
    """
    wts = p.weights
    dp = np.asarray(dp, dtype=float)
    k = len(wts)
    if np.any(wts == 0):
        raise SingularSystemError("general solver requires p > 0 entrywise")
    if abs(dp.sum()) > 1e-10:
        raise InconsistentRHSError(f"sum(dp) = {dp.sum()!r}, not 0")
    rho = w.rho(p)
    lap = np.diag(rho.sum(axis=1)) - rho
    bordered = np.zeros((k + 1, k + 1))
    bordered[:k, :k] = lap
    bordered[:k, k] = 1.0
    bordered[k, :k] = 1.0
    rhs = np.concatenate([dp, [0.0]])
    try:
        sol = np.linalg.solve(bordered, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"laplacian system singular: {exc}") from exc
    f = sol[:k]
    resid = np.abs(lap @ f - dp).max()
    if resid > 1e-8:
        raise SingularSystemError(f"laplacian solve residual {resid!r}")
    return f


def closed_form_potential(p: Pmf, dp: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Closed-form potential f(x) = dp(x) / (tau(x) sum_s tau(s)).

    Entries with tau = 0 are excluded (f = 0 there) and must have dp = 0.
    """
    dp = np.asarray(dp, dtype=float)
    tau = np.asarray(tau, dtype=float)
    total = tau.sum()
    if total <= 0:
        raise DivideByZeroTauError("tau sums to zero")
    if np.any((tau == 0) & (dp != 0)):
        raise DivideByZeroTauError("tau = 0 where dp != 0")
    f = np.zeros_like(dp)
    pos = tau > 0
    f[pos] = dp[pos] / (tau[pos] * total)
    return f


def flux_stable(p: Pmf, dp: np.ndarray) -> Flux:
    """Closed-form flux [p(z) dp(x) - dp(z) p(x)]_+, safe for any p.

    Columns of zero-probability interior states vanish, at most one direction
    per pair is active, and the divergence equals -dp wherever p > 0.
    """
    w = p.weights
    dp = np.asarray(dp, dtype=float)
    m = np.maximum(np.outer(dp, w) - np.outer(w, dp), 0.0)
    np.fill_diagonal(m, 0.0)
    return Flux(m)


def flux_indicator(p: Pmf, dp: np.ndarray) -> Flux:
    """Uniform-weight flux (1/K) [dp(x) - dp(z)]_+, intended for positive paths.

    Not safe in general: a zero-probability state with nonzero dp elsewhere
    still emits flux, which velocity_from_flux surfaces as UnsafeFluxError.
    """
    dp = np.asarray(dp, dtype=float)
    k = len(p)
    m = np.maximum(np.subtract.outer(dp, dp), 0.0) / k
    np.fill_diagonal(m, 0.0)
    return Flux(m)


def flux_power(p: Pmf, dp: np.ndarray, alpha: float) -> Flux:
    """Power-family flux [dp(x) s(z) - dp(z) s(x)]_+ with s = p^alpha / sum p^alpha.

    alpha = 1 reproduces flux_stable exactly; alpha -> inf tends to
    flux_power_inf.
    """
    if alpha < 1:
        raise AlphaOutOfRangeError(f"alpha must be >= 1, got {alpha}")
    dp = np.asarray(dp, dtype=float)
    s = p.weights**alpha
    s = s / s.sum()
    m = np.maximum(np.outer(dp, s) - np.outer(s, dp), 0.0)
    np.fill_diagonal(m, 0.0)
    return Flux(m)


def flux_power_inf(p: Pmf, dp: np.ndarray) -> Flux:
    """Limit of the power family: route everything through the modal state.

    With m = argmax p (lowest index on ties), j(x, z) = [dp(x) d_m(z)
    - dp(z) d_m(x)]_+; flux into or out of a state vanishes as its probability
    does.
    """
    dp = np.asarray(dp, dtype=float)
    s = np.zeros(len(p))
    s[int(np.argmax(p.weights))] = 1.0
    m = np.maximum(np.outer(dp, s) - np.outer(s, dp), 0.0)
    np.fill_diagonal(m, 0.0)
    return Flux(m)


def velocity_mixture_conditional(sched: Scheduler, t: float, x1: int,
                                 alphabet: Alphabet) -> RateMatrix:
    """Conditional velocity of any mixture path: jump straight to the target.

    Every column z != x1 carries a single off-diagonal rate
    lam = kappa_dot / (1 - kappa) into x1; column x1 is zero.
    """
    k = alphabet.k
    lam = sched.rate(t, x1)
    u = np.zeros((k, k))
    u[x1, :] = lam
    u[np.arange(k), np.arange(k)] -= lam
    u[:, x1] = 0.0
    return RateMatrix(u)


def mixture_velocity_column(sched: Scheduler, t: float, z: int, x1: int,
                            k: int) -> np.ndarray:
    """Column z of the mixture conditional velocity given target x1."""
    col = np.zeros(k)
    if z != x1:
        lam = sched.rate(t, x1)
        col[x1] = lam
        col[z] = -lam
    return col


def velocity_metric_conditional(path: MetricPath, t: float, x1: int) -> RateMatrix:
    """Conditional velocity of a metric path; moves only closer to the target."""
    w = path.pmf(t, x1).weights
    d = path.dist[:, x1]
    bdot = path.beta.beta_dot(t)
    u = w[:, None] * bdot * np.maximum(d[None, :] - d[:, None], 0.0)
    np.fill_diagonal(u, 0.0)
    np.fill_diagonal(u, -u.sum(axis=0))
    return RateMatrix(u)


def metric_velocity_column(path: MetricPath, t: float, z: int, x1: int) -> np.ndarray:
    w = path.pmf(t, x1).weights
    d = path.dist[:, x1]
    col = w * path.beta.beta_dot(t) * np.maximum(d[z] - d, 0.0)
    col[z] = 0.0
    col[z] = -col.sum()
    return col


def conditional_velocity_matrix(path, t: float, x1: int) -> RateMatrix:
    """Stable-flux conditional velocity for a path, with closed-form fast paths."""
    if isinstance(path, MixturePath):
        return velocity_mixture_conditional(path.scheduler, t, x1, path.alphabet)
    if isinstance(path, MetricPath):
        return velocity_metric_conditional(path, t, x1)
    return velocity_from_flux(flux_stable(path.pmf(t, x1), path.dpmf(t, x1)),
                              path.pmf(t, x1))


def conditional_velocity_column(path: ConditionalPath, t: float, z: int,
                                x1: int) -> np.ndarray:
    if isinstance(path, MixturePath):
        return mixture_velocity_column(path.scheduler, t, z, x1, path.k)
    if isinstance(path, MetricPath):
        return metric_velocity_column(path, t, z, x1)
    return conditional_velocity_matrix(path, t, x1).column(z)


def corrector_flux(p: Pmf, f: np.ndarray,
                   w: WeightSpec | np.ndarray) -> Flux:
    """Symmetrized flux j(x, z) = rho(x, z) |f(x) - f(z)|; divergence-free.

    ``w`` is a WeightSpec (rho = tau(x) tau(z), symmetric by construction) or a
    raw weight matrix, in which case rho(x, z) = p(z) / w(x, z) must come out
    symmetric.
    """
    f = np.asarray(f, dtype=float)
    if isinstance(w, WeightSpec):
        rho = w.rho(p)
    else:
        wm = np.asarray(w, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(wm > 0, p.weights[None, :] / wm, 0.0)
        if not np.allclose(rho, rho.T, atol=1e-12):
            raise AsymmetricWeightError("p(z)/w(x,z) is not symmetric")
    m = rho * np.abs(np.subtract.outer(f, f))
    np.fill_diagonal(m, 0.0)
    return Flux(m)


def corrector_velocity_column(path: ConditionalPath, t: float, z: int,
                              x1: int) -> np.ndarray:
    """Column z of the stable-weight corrector velocity on p_t(.|x1)."""
    p = path.pmf(t, x1).weights
    if p[z] == 0:
        return np.zeros(path.k)
    dp = path.dpmf(t, x1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(p > 0, dp / np.where(p > 0, p, 1.0), 0.0)
    col = p * np.abs(f - f[z])
    col[p == 0] = 0.0
    col[z] = 0.0
    col[z] = -col.sum()
    return col


def marginal_velocity(posterior, cond_column: Callable[[float, int, int], np.ndarray],
                      z, i: int, t: float) -> np.ndarray:
    """Posterior-weighted conditional velocity column for coordinate i.

    Averages the conditional column at the current token over the posterior on
    the clean token; costs O(K^2) per coordinate. The result is a valid rate
    column (non-negative off the current token, total zero).
    """
    post = posterior.prob(t, z, i).weights
    zi = int(z[i])
    k = post.size
    out = np.zeros(k)
    for x1 in range(k):
        if post[x1] > 0:
            out += post[x1] * cond_column(t, zi, x1)
    return out


def marginal_velocity_mixture(posterior, sched: Scheduler, z, i: int,
                              t: float) -> np.ndarray:
    """Closed-form marginal velocity for mixture paths, O(K) per coordinate."""
    post = posterior.prob(t, z, i).weights
    lam = sched.rate_vec(t, post.size)
    out = lam * post
    out[int(z[i])] -= float(lam @ post)
    return out


def kinetic_energy(j: Flux, p: Pmf, w: WeightSpec | np.ndarray) -> float:
    """Energy (1/2) sum_{x != z} (w(x,z)/p(z)) j(x,z)^2 of a flux.

    The one-half averages the two directions of each state pair, so the
    geodesic path's integrated energy equals twice its squared sphere angle.
    Terms with zero flux contribute zero even where the weight diverges; a
    positive flux against an infinite weight yields an infinite energy.
    """
    m = j.mat
    if isinstance(w, WeightSpec):
        tau = w.tau(p)
        denom = np.outer(tau, tau)
    else:
        wm = np.asarray(w, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = np.where(wm != 0, p.weights[None, :] / wm, 0.0)
    active = m > 0
    if np.any(active & (denom <= 0)):
        return float("inf")
    total = float((m[active] ** 2 / denom[active]).sum())
    return 0.5 * total


def integrated_kinetic_energy(pmf_fn: Callable[[float], Pmf],
                              dpmf_fn: Callable[[float], np.ndarray],
                              w: WeightSpec | None = None,
                              t_max: float = 1.0 - 1e-6,
                              n_grid: int = 2001) -> float:
    """Trapezoid integral of the stable-flux kinetic energy along a path."""
    w = w or WeightSpec.stable()
    ts = np.linspace(0.0, t_max, n_grid)
    vals = np.empty(n_grid)
    for idx, t in enumerate(ts):
        p = pmf_fn(float(t))
        j = flux_stable(p, dpmf_fn(float(t)))
        vals[idx] = kinetic_energy(j, p, w)
    return float(np.trapezoid(vals, ts))
