"""Likelihood lower bounds and the exact-likelihood oracle.

Provides the per-point bound integrands (general, mixture, masked), Monte
Carlo estimators over time (uniform or stratified in the scheduler variable),
and a brute-force oracle that integrates the Kolmogorov forward equation over
the full joint space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import JointPmf, state_index, states_array
from .errors import (
    ConfigError,
    KappaCovUnavailableError,
    RateSupportMismatchError,
    SizeGuardError,
)
from .paths import (
    ConditionalPath,
    KineticOptimalScheduler,
    MixturePath,
    Scheduler,
)
from .posterior import PosteriorModel, _sample_path_tokens
from .velocity import conditional_velocity_column, marginal_velocity

ORACLE_SIZE_CAP = 10**4
_REFERENCE_ANGLE = math.pi / 4.0


@dataclass(frozen=True)
class ElboEstimate:
    """Monte Carlo lower-bound estimate in nats with its standard error."""

    value: float
    std_error: float
    n_samples: int
    t_cutoff: float
    caveat: str = "time integral truncated at t_cutoff; the [t_cutoff, 1] tail is omitted"


def make_marginal_column(posterior: PosteriorModel, path: ConditionalPath):
    """Marginal-velocity evaluator (t, z, i) -> rate column at the state."""

    def column(t, z, i):
        return marginal_velocity(
            posterior,
            lambda tt, zz, x1: conditional_velocity_column(path, tt, zz, x1),
            z, i, t)

    return column


def elbo_integrand_general(x1, x_t, t: float, marginal_column,
                           cond_column) -> float:
    """Path-measure bound integrand from marginal and conditional rates.

    Per coordinate: marginal diagonal minus conditional diagonal plus the
    conditional off-diagonal rates weighted by the log rate ratio. Zero
    conditional rates contribute nothing; a positive conditional rate over a
    zero marginal rate breaks absolute continuity and raises.
    """
    x1 = np.asarray(x1, dtype=int)
    x_t = np.asarray(x_t, dtype=int)
    total = 0.0
    for i in range(x_t.size):
        zi = int(x_t[i])
        u_marg = np.asarray(marginal_column(t, x_t, i), dtype=float)
        u_cond = np.asarray(cond_column(t, zi, int(x1[i])), dtype=float)
        total += u_marg[zi] - u_cond[zi]
        off = u_cond.copy()
        off[zi] = 0.0
        active = off > 0
        if np.any(active & (u_marg <= 0)):
            raise RateSupportMismatchError(
                "conditional jump with zero marginal rate at coordinate "
                f"{i}, t = {t}")
        if np.any(active):
            total += float(
                (off[active] * np.log(u_marg[active] / off[active])).sum())
    return total


def elbo_integrand_mixture(x1, x_t, t: float, posterior: PosteriorModel,
                           sched: Scheduler) -> float:
    """Closed-form mixture-path integrand, O(D K) per evaluation.

    Returns -inf when the model puts zero mass on a clean token that the
    state has not yet reached.
    """
    x1 = np.asarray(x1, dtype=int)
    x_t = np.asarray(x_t, dtype=int)
    total = 0.0
    for i in range(x_t.size):
        post = posterior.prob(t, x_t, i).weights
        lam = sched.rate_vec(t, post.size)
        zi, x1i = int(x_t[i]), int(x1[i])
        total += lam[zi] * post[zi] - float(lam @ post)
        if zi != x1i:
            if post[x1i] <= 0.0:
                return -math.inf
            total += lam[x1i] * (1.0 + math.log(post[x1i]))
    return total


def elbo_integrand_masked(x1, x_t, t: float, posterior: PosteriorModel,
                          sched: Scheduler, mask_token: int) -> float:
    """Masked-path integrand: only still-masked coordinates contribute."""
    x1 = np.asarray(x1, dtype=int)
    x_t = np.asarray(x_t, dtype=int)
    total = 0.0
    for i in range(x_t.size):
        if int(x_t[i]) != mask_token:
            continue
        post = posterior.prob(t, x_t, i).weights
        lam = sched.rate_vec(t, post.size)
        x1i = int(x1[i])
        if post[x1i] <= 0.0:
            return -math.inf
        total += -float(lam @ post) + lam[x1i] * (1.0 + math.log(post[x1i]))
    return total


def _kappa_inverse(sched: Scheduler, kap: np.ndarray) -> np.ndarray:
    """Invert a token-independent scheduler by bisection (monotone kappa)."""
    if sched.kind == "linear":
        return np.asarray(kap, dtype=float)
    if sched.kind == "cubic":
        return np.asarray(kap, dtype=float) ** (1.0 / 3.0)
    lo = np.zeros_like(kap)
    hi = np.ones_like(kap)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        val = np.array([sched.kappa(float(m)) for m in mid])
        too_low = val < kap
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
    return 0.5 * (lo + hi)


def _reference_kappa(t) -> np.ndarray:
    om = _REFERENCE_ANGLE
    return 1.0 - np.sin((1.0 - np.asarray(t, dtype=float)) * om) ** 2 \
        / math.sin(om) ** 2


def _reference_kappa_dot(t) -> np.ndarray:
    om = _REFERENCE_ANGLE
    return om * np.sin(2.0 * (1.0 - np.asarray(t, dtype=float)) * om) \
        / math.sin(om) ** 2


def _reference_kappa_inv(kap) -> np.ndarray:
    om = _REFERENCE_ANGLE
    arg = np.sqrt(np.clip(1.0 - np.asarray(kap, dtype=float), 0.0, 1.0)) \
        * math.sin(om)
    return 1.0 - np.arcsin(arg) / om


def elbo_estimate(x1, path: ConditionalPath, posterior: PosteriorModel,
                  n_samples: int, t_cutoff: float = 1.0 - 1e-3,
                  use_kappa_cov: bool = False, seed: int = 0) -> ElboEstimate:
    """Monte Carlo estimate of the likelihood bound for one clean state.

    The plain estimator draws times uniformly on [0, t_cutoff]. With
    ``use_kappa_cov`` and a mixture path, the integration variable changes to
    the scheduler value on a stratified grid covering the same interval:
    directly for token-independent schedulers, and through the fixed
    quarter-circle reference scheduler for the source-dependent one. Other
    token-dependent schedulers are not supported.
    """
    if not 0.0 < t_cutoff < 1.0:
        raise ConfigError(f"t_cutoff = {t_cutoff} outside (0, 1)")
    x1 = np.asarray(x1, dtype=int)
    rng = np.random.Generator(np.random.Philox(key=seed))
    is_mixture = isinstance(path, MixturePath)

    if use_kappa_cov:
        if not is_mixture:
            raise KappaCovUnavailableError(
                "stratified scheduler-variable estimator needs a mixture path")
        sched = path.scheduler
        if sched.token_independent:
            kap_max = sched.kappa(t_cutoff)
            eps = rng.random()
            kap = (np.arange(n_samples) + eps) * kap_max / n_samples
            ts = _kappa_inverse(sched, kap)
            weights = kap_max / (1.0 - kap)
            reduced = True
        elif isinstance(sched, KineticOptimalScheduler):
            kap_max = float(_reference_kappa(t_cutoff))
            eps = rng.random()
            kap = (np.arange(n_samples) + eps) * kap_max / n_samples
            ts = _reference_kappa_inv(kap)
            weights = kap_max / _reference_kappa_dot(ts)
            reduced = False
        else:
            raise KappaCovUnavailableError(
                f"scheduler kind {sched.kind!r} has no stratified estimator")
        u = rng.random((n_samples, x1.size))
        x_ts = _sample_path_tokens(path, ts, np.broadcast_to(
            x1, (n_samples, x1.size)).copy(), u)
        vals = np.empty(n_samples)
        for s in range(n_samples):
            if reduced:
                vals[s] = weights[s] * _reduced_mixture_integrand(
                    x1, x_ts[s], float(ts[s]), posterior)
            else:
                vals[s] = weights[s] * elbo_integrand_mixture(
                    x1, x_ts[s], float(ts[s]), posterior, sched)
    else:
        ts = rng.random(n_samples) * t_cutoff
        u = rng.random((n_samples, x1.size))
        x_ts = _sample_path_tokens(path, ts, np.broadcast_to(
            x1, (n_samples, x1.size)).copy(), u)
        marginal_column = None if is_mixture else make_marginal_column(
            posterior, path)
        cond_column = None if is_mixture else (
            lambda tt, zz, xx: conditional_velocity_column(path, tt, zz, xx))
        vals = np.empty(n_samples)
        for s in range(n_samples):
            if is_mixture:
                vals[s] = elbo_integrand_mixture(
                    x1, x_ts[s], float(ts[s]), posterior, path.scheduler)
            else:
                vals[s] = elbo_integrand_general(
                    x1, x_ts[s], float(ts[s]), marginal_column, cond_column)
        vals = vals * t_cutoff

    value = float(vals.mean())
    std_error = float(vals.std(ddof=1) / math.sqrt(n_samples)) \
        if n_samples > 1 else float("inf")
    return ElboEstimate(value=value, std_error=std_error,
                        n_samples=n_samples, t_cutoff=t_cutoff)


def _reduced_mixture_integrand(x1, x_t, t: float,
                               posterior: PosteriorModel) -> float:
    """Mixture integrand with the common jump-rate factor divided out.

    Valid for token-independent schedulers, where the full integrand equals
    rate(t) times this quantity.
    """
    x1 = np.asarray(x1, dtype=int)
    x_t = np.asarray(x_t, dtype=int)
    total = 0.0
    for i in range(x_t.size):
        post = posterior.prob(t, x_t, i).weights
        zi, x1i = int(x_t[i]), int(x1[i])
        if zi == x1i:
            total += post[zi] - 1.0
        else:
            if post[x1i] <= 0.0:
                return -math.inf
            total += post[zi] + math.log(post[x1i])
    return total


# -- Kolmogorov forward oracle ------------------------------------------------


def _mixture_rate_columns(path: MixturePath, t: float, ptab: np.ndarray,
                          states: np.ndarray) -> list[np.ndarray]:
    """Per coordinate, the (K, S) marginal rate columns at every state."""
    k = path.k
    lam = path.scheduler.rate_vec(t, k)
    out = []
    for i in range(states.shape[1]):
        post = ptab[:, i, :]  # (S, K)
        cols = lam[:, None] * post.T  # (K, S)
        drain = post @ lam  # (S,)
        cols[states[:, i], np.arange(states.shape[0])] -= drain
        out.append(cols)
    return out


def _generic_rate_columns(path: ConditionalPath, t: float, ptab: np.ndarray,
                          states: np.ndarray) -> list[np.ndarray]:
    k = path.k
    cond = np.empty((k, k, k))  # [x, z_tok, x1]
    for x1 in range(k):
        for z in range(k):
            cond[:, z, x1] = conditional_velocity_column(path, t, z, x1)
    out = []
    for i in range(states.shape[1]):
        sel = cond[:, states[:, i], :]  # (K, S, K_x1)
        cols = np.einsum("ysk,sk->ys", sel, ptab[:, i, :])
        out.append(cols)
    return out


def rate_columns_fn(path: ConditionalPath, posterior: PosteriorModel):
    """Builds t -> per-coordinate (K, S) marginal rate columns."""
    k = path.k
    d = posterior.dims
    states = states_array(k, d)

    def columns(t: float) -> list[np.ndarray]:
        ptab = posterior.prob_table(t)
        if isinstance(path, MixturePath):
            return _mixture_rate_columns(path, t, ptab, states)
        return _generic_rate_columns(path, t, ptab, states)

    return columns


def integrate_forward(columns_fn, p0: np.ndarray, k: int, dims: int,
                      t_cutoff: float, ode_steps: int,
                      snapshot_times=()) -> tuple[np.ndarray, dict]:
    """Classical RK4 for the forward equation on the full joint space.

    ``columns_fn(t)`` yields per-coordinate (K, S) rate columns; the generator
    action routes each column entry to the state with that coordinate
    replaced. Returns the state at t_cutoff and snapshots at the grid times
    nearest each requested time.
    """
    states = states_array(k, dims)
    n = k**dims
    neighbors = [
        (np.arange(n)[:, None]
         + (np.arange(k)[None, :] - states[:, i][:, None]) * k**i)
        for i in range(dims)
    ]

    def apply(cols: list[np.ndarray], p: np.ndarray) -> np.ndarray:
        out = np.zeros(n)
        for i in range(dims):
            np.add.at(out, neighbors[i], cols[i].T * p[:, None])
        return out

    h = t_cutoff / ode_steps
    grid = np.arange(ode_steps + 1) * h
    # snapshots are keyed by the grid time actually used, not the request
    snap_idx = {}
    for ts in snapshot_times:
        idx = int(np.argmin(np.abs(grid - ts)))
        snap_idx[idx] = float(grid[idx])
    snaps: dict[float, np.ndarray] = {}
    p = np.asarray(p0, dtype=float).copy()
    if 0 in snap_idx:
        snaps[snap_idx[0]] = p.copy()
    for step in range(ode_steps):
        t = grid[step]
        c_a = columns_fn(float(t))
        c_b = columns_fn(float(t + 0.5 * h))
        c_c = columns_fn(float(t + h))
        k1 = apply(c_a, p)
        k2 = apply(c_b, p + 0.5 * h * k1)
        k3 = apply(c_b, p + 0.5 * h * k2)
        k4 = apply(c_c, p + h * k3)
        p = p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if step + 1 in snap_idx:
            snaps[snap_idx[step + 1]] = p.copy()
    return p, snaps


def _source_joint(path: ConditionalPath, dims: int) -> np.ndarray:
    src = path.source_pmf().weights
    p = src
    for _ in range(dims - 1):
        p = np.multiply.outer(p, src)
    return np.asarray(p).flatten(order="F") if dims > 1 else src.copy()


def _denoise(ptab: np.ndarray, p: np.ndarray, k: int, dims: int) -> np.ndarray:
    """Apply the factorized posterior as an exact final transition."""
    out = np.zeros(k**dims)
    for z in range(p.size):
        if p[z] == 0:
            continue
        w = ptab[z, 0, :]
        for i in range(1, dims):
            w = np.multiply.outer(w, ptab[z, i, :])
        out += p[z] * (w.flatten(order="F") if dims > 1 else w)
    return out


def kolmogorov_forward(q: JointPmf, path: ConditionalPath,
                       posterior: PosteriorModel, t_cutoff: float = 1.0 - 1e-3,
                       ode_steps: int = 2000, snapshot_times=(),
                       denoise: bool = True) -> tuple[np.ndarray, dict]:
    """Exact marginal evolution under the factorized marginal velocity.

    Returns the final joint PMF over all K^D states (after the posterior
    denoising transition when enabled) and any requested snapshots.
    """
    if q.n_states > ORACLE_SIZE_CAP:
        raise SizeGuardError(f"K^D = {q.n_states} exceeds oracle cap")
    if ode_steps < 1000:
        raise ConfigError("oracle needs at least 1000 integration steps")
    columns = rate_columns_fn(path, posterior)
    p0 = _source_joint(path, q.dims)
    p, snaps = integrate_forward(columns, p0, q.k, q.dims, t_cutoff,
                                 ode_steps, snapshot_times)
    if denoise:
        p = _denoise(posterior.prob_table(t_cutoff), p, q.k, q.dims)
    return p, snaps


def exact_loglik_oracle(q: JointPmf, path: ConditionalPath,
                        posterior: PosteriorModel, x1,
                        ode_steps: int = 2000,
                        t_cutoff: float = 1.0 - 1e-3) -> float:
    """Brute-force log-likelihood of one clean state via the forward equation."""
    p, _ = kolmogorov_forward(q, path, posterior, t_cutoff, ode_steps)
    val = float(p[state_index(x1, q.k)])
    return math.log(val) if val > 0 else -math.inf
