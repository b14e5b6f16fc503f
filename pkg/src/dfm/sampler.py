"""CTMC simulation: Euler and always-valid steps, two-step posterior sampling,
corrector mixing, and reproducible ensemble generation.

Each trajectory owns a counter-based random stream keyed by (seed, trajectory
index), so results are bit-identical for a given pair regardless of chunking
or thread count. Within a trajectory the uniform layout is fixed per step:
slot 0 drives the posterior draw, slot 1 the jump decision (or the Euler
categorical draw), slot 2 the jump target.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Pmf
from .errors import ConfigError, InvalidStepPmfError, ZeroMarginalError
from .paths import ConditionalPath, MixturePath
from .posterior import PosteriorModel
from .velocity import (
    conditional_velocity_matrix,
    corrector_velocity_column,
)

_NEG_FUZZ = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    """Step size, horizon, scheme, and corrector mixing for simulation."""

    h: float = 1.0 / 500.0
    t_end: float = 1.0 - 1e-3
    corrector_strength: float = 0.0
    scheme: str = "always_valid"
    final_denoise: bool = True
    seed: int = 0
    record_times: tuple = ()
    chunk_size: int = 16384
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.h <= 1.0:
            raise ConfigError(f"step size h = {self.h} outside (0, 1]")
        if not 0.0 < self.t_end < 1.0:
            raise ConfigError(f"t_end = {self.t_end} outside (0, 1)")
        if self.scheme not in ("euler", "always_valid"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.corrector_strength < 0:
            raise ConfigError("corrector_strength must be non-negative")


@dataclass(frozen=True)
class Trajectory:
    """One simulated path: recorded times, states, stream seed, and config."""

    times: np.ndarray
    states: np.ndarray  # (n_times, D) tokens
    seed: int
    index: int
    config: SamplerConfig


@dataclass
class SimulationResult:
    """Ensemble arrays: states[k] holds all trajectories at times[k]."""

    times: np.ndarray  # (n_rec,)
    states: np.ndarray  # (n_traj, n_rec, D)
    final: np.ndarray  # (n_traj, D), after denoising when enabled
    seed: int
    config: SamplerConfig

    def trajectories(self) -> list[Trajectory]:
        times = self.times
        states = self.states
        if self.config.final_denoise:
            times = np.concatenate([times, [1.0]])
            states = np.concatenate([states, self.final[:, None, :]], axis=1)
        return [Trajectory(times=times, states=states[i].copy(), seed=self.seed,
                           index=i, config=self.config)
                for i in range(states.shape[0])]


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """The trajectory's private counter-based stream.

    The Philox key composes the run seed (high 64 bits) with the trajectory
    index, giving documented independent streams per (seed, index).
    """
    key = ((seed & 0xFFFFFFFFFFFFFFFF) << 64) + index
    return np.random.Generator(np.random.Philox(key=key))


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw: smallest index with cdf >= u."""
    k = cdf_rows.shape[-1]
    return np.minimum(k - 1, (cdf_rows < u[..., None]).sum(axis=-1))


def euler_step(z, t: float, h: float, marginal_column, rng: np.random.Generator):
    """First-order step: each coordinate sampled from delta + h * rates.

    ``marginal_column(t, z, i)`` returns the rate column at the current state.
    Raises InvalidStepPmfError when h exceeds the local stability bound; the
    PMF is never repaired.
    """
    z = np.asarray(z, dtype=int)
    out = z.copy()
    for i in range(z.size):
        col = marginal_column(t, z, i)
        pmf = h * np.asarray(col, dtype=float)
        pmf[z[i]] += 1.0
        if pmf.min() < -_NEG_FUZZ:
            raise InvalidStepPmfError(
                f"step pmf entry {pmf.min()!r} < 0 at coordinate {i}; h too large")
        cdf = np.cumsum(np.maximum(pmf, 0.0))
        out[i] = int(_inverse_cdf(cdf[None, :], np.array([rng.random()]))[0])
    return out


def always_valid_step(z_i: int, t: float, h: float, x1_i: int,
                      cond_column: np.ndarray, rng: np.random.Generator) -> int:
    """Exponential-clock step that is a valid draw for any h > 0.

    With lam the magnitude of the diagonal rate, stay with probability
    exp(-h lam); otherwise draw the landing token from the off-diagonal rates
    normalized to one, excluding the current token.
    """
    col = np.asarray(cond_column, dtype=float)
    lam = -float(col[z_i])
    if lam <= 0.0:
        return int(z_i)
    if rng.random() > -math.expm1(-h * lam):
        return int(z_i)
    off = np.maximum(col, 0.0)
    off[z_i] = 0.0
    total = off.sum()
    if total <= 0.0:
        return int(z_i)
    cdf = np.cumsum(off / total)
    return int(_inverse_cdf(cdf[None, :], np.array([rng.random()]))[0])


def posterior_two_step(z, t: float, h: float, posterior: PosteriorModel,
                       cond_column, rng: np.random.Generator,
                       scheme: str = "always_valid"):
    """Sample a clean token per coordinate, then step with its conditional rates.

    Matches the time marginals of the marginal-velocity Euler step while
    avoiding the O(K^2) posterior-weighted summation.
    """
    z = np.asarray(z, dtype=int)
    out = z.copy()
    for i in range(z.size):
        post = posterior.prob(t, z, i).weights
        x1 = int(_inverse_cdf(np.cumsum(post)[None, :],
                              np.array([rng.random()]))[0])
        col = np.asarray(cond_column(t, int(z[i]), x1), dtype=float)
        if scheme == "always_valid":
            out[i] = always_valid_step(int(z[i]), t, h, x1, col, rng)
        else:
            pmf = h * col
            pmf[z[i]] += 1.0
            if pmf.min() < -_NEG_FUZZ:
                raise InvalidStepPmfError(
                    f"step pmf entry {pmf.min()!r} < 0; h too large")
            cdf = np.cumsum(np.maximum(pmf, 0.0))
            out[i] = int(_inverse_cdf(cdf[None, :], np.array([rng.random()]))[0])
    return out


def _time_grid(h: float, t_end: float) -> np.ndarray:
    n_full = int(math.ceil(t_end / h - 1e-12))
    ts = np.minimum(np.arange(n_full + 1) * h, t_end)
    ts[-1] = t_end
    return ts


def _cond_tensor(path: ConditionalPath, t: float) -> np.ndarray:
    """Stacked conditional rate matrices, entry [x, z, x1]."""
    k = path.k
    out = np.empty((k, k, k))
    for x1 in range(k):
        out[:, :, x1] = conditional_velocity_matrix(path, t, x1).mat
    return out


def _corr_tensor(path: ConditionalPath, t: float) -> np.ndarray:
    """Stacked stable-weight corrector rate matrices, entry [x, z, x1]."""
    k = path.k
    out = np.empty((k, k, k))
    for x1 in range(k):
        for z in range(k):
            out[:, z, x1] = corrector_velocity_column(path, t, z, x1)
    return out


class _StepTables:
    """Per-step lookup tables for vectorized coordinate updates.

    Mixture paths with the always-valid scheme and no corrector jump straight
    to the drawn clean token, so only the jump intensities are tabulated; with
    a token-independent intensity the jump decision is taken first and the
    posterior is only consulted for the jumpers. All other cases tabulate the
    conditional (plus scaled corrector) rate columns per clean token.
    """

    def __init__(self, path: ConditionalPath, t: float, h: float,
                 scheme: str, corrector: float):
        k = path.k
        self.k = k
        self.scheme = scheme
        self.uniform_rate = None
        self.simple_mixture = (isinstance(path, MixturePath)
                               and corrector == 0.0 and scheme == "always_valid")
        if self.simple_mixture:
            self.lam_vec = path.scheduler.rate_vec(t, k)
            if np.ptp(self.lam_vec) == 0.0:
                self.uniform_rate = float(self.lam_vec[0])
            return
        col = _cond_tensor(path, t)
        if corrector > 0.0:
            col = col + corrector * _corr_tensor(path, t)
        self.lam = -col[np.arange(k), np.arange(k), :]  # (z, x1)
        off = col.copy()
        off[np.arange(k), np.arange(k), :] = 0.0
        off = np.maximum(off, 0.0)
        if scheme == "always_valid":
            denom = np.where(self.lam > 0, self.lam, 1.0)
            self.target_cdf = np.cumsum(off / denom[None, :, :], axis=0)
        else:
            pmf = h * col
            pmf[np.arange(k), np.arange(k), :] += 1.0
            self.step_pmf = pmf

    def advance(self, zi: np.ndarray, draw_x1, h: float,
                u_post: np.ndarray, u_jump: np.ndarray,
                u_tgt: np.ndarray) -> np.ndarray:
        """Advance one coordinate; draw_x1(u, subset) samples clean tokens."""
        if self.uniform_rate is not None:
            jump = u_jump <= -np.expm1(-h * self.uniform_rate)
            if not jump.any():
                return zi
            out = zi.copy()
            out[jump] = draw_x1(u_post[jump], jump)
            return out
        x1 = draw_x1(u_post, None)
        if self.simple_mixture:
            lam = np.where(zi == x1, 0.0, self.lam_vec[x1])
            jump = u_jump <= -np.expm1(-h * lam)
            return np.where(jump, x1, zi)
        if self.scheme == "always_valid":
            lam = self.lam[zi, x1]
            jump = (lam > 0) & (u_jump <= -np.expm1(-h * lam))
            idx = np.flatnonzero(jump)
            if idx.size == 0:
                return zi
            cdf = self.target_cdf[:, zi[idx], x1[idx]].T  # (n_jump, K)
            out = zi.copy()
            out[idx] = _inverse_cdf(cdf, u_tgt[idx])
            return out
        pmf = self.step_pmf[:, zi, x1].T  # (n, K)
        if pmf.min() < -_NEG_FUZZ:
            raise InvalidStepPmfError(
                f"step pmf entry {pmf.min()!r} < 0; h too large for euler scheme")
        cdf = np.cumsum(np.maximum(pmf, 0.0), axis=1)
        return _inverse_cdf(cdf, u_jump)


class _PosteriorCdf:
    """Normalized posterior CDF per (state, coordinate) at one time."""

    def __init__(self, posterior: PosteriorModel, t: float):
        ptab = posterior.prob_table(t)
        tot = ptab.sum(axis=-1)
        self.ok = tot > 0
        safe = np.where(self.ok, tot, 1.0)
        self.cdf = np.cumsum(ptab, axis=-1) / safe[..., None]

    def draw(self, s_idx: np.ndarray, i: int, u: np.ndarray) -> np.ndarray:
        if not self.ok[s_idx, i].all():
            raise ZeroMarginalError("posterior undefined at a visited state")
        return _inverse_cdf(self.cdf[s_idx, i, :], u)


class _StepContext:
    """Per-step tables shared by every chunk: rates, targets, posterior CDFs."""

    def __init__(self, posterior: PosteriorModel, path: ConditionalPath,
                 config: SamplerConfig, grid: np.ndarray):
        self.steps = []
        for step in range(grid.size - 1):
            t = float(grid[step])
            h = float(grid[step + 1] - grid[step])
            self.steps.append((h,
                               _StepTables(path, t, h, config.scheme,
                                           config.corrector_strength),
                               _PosteriorCdf(posterior, t)))
        self.denoise_cdf = _PosteriorCdf(posterior, float(grid[-1])) \
            if config.final_denoise else None


def _simulate_chunk(path: ConditionalPath, config: SamplerConfig,
                    ctx: _StepContext, dims: int, ids: np.ndarray,
                    grid: np.ndarray, rec_idx: np.ndarray) -> tuple:
    n = ids.size
    d = dims
    k = path.k
    n_steps = grid.size - 1
    powers = k ** np.arange(d)

    blocks = np.empty((n, n_steps + 2, 3, d))
    for j, idx in enumerate(ids):
        trajectory_rng(config.seed, int(idx)).random(
            (n_steps + 2, 3, d), out=blocks[j])

    src_cdf = np.cumsum(path.source_pmf().weights)
    z = np.empty((n, d), dtype=int)
    for i in range(d):
        z[:, i] = _inverse_cdf(src_cdf[None, :], blocks[:, 0, 0, i])

    recorded = np.empty((n, rec_idx.size, d), dtype=np.int16)
    rec_map = {int(g): r for r, g in enumerate(rec_idx)}
    if 0 in rec_map:
        recorded[:, rec_map[0], :] = z

    for step in range(n_steps):
        h, tables, post_cdf = ctx.steps[step]
        s_idx = z @ powers
        z_new = np.empty_like(z)
        for i in range(d):

            def draw_x1(u, subset, _i=i):
                sel = s_idx if subset is None else s_idx[subset]
                return post_cdf.draw(sel, _i, u)

            z_new[:, i] = tables.advance(z[:, i], draw_x1, h,
                                         blocks[:, step + 1, 0, i],
                                         blocks[:, step + 1, 1, i],
                                         blocks[:, step + 1, 2, i])
        z = z_new
        if step + 1 in rec_map:
            recorded[:, rec_map[step + 1], :] = z

    final = z.copy()
    if ctx.denoise_cdf is not None:
        s_idx = z @ powers
        for i in range(d):
            final[:, i] = ctx.denoise_cdf.draw(s_idx, i,
                                               blocks[:, n_steps + 1, 0, i])
    return recorded, final


def _as_posterior(model, path: ConditionalPath) -> PosteriorModel:
    if isinstance(model, PosteriorModel):
        return model
    from .posterior import ExactPosterior  # JointPmf target: exact Bayes

    return ExactPosterior(model, path)


def simulate_ensemble(posterior, path: ConditionalPath,
                      config: SamplerConfig, n_trajectories: int) -> SimulationResult:
    """Run the two-step sampler for an ensemble of trajectories.

    ``posterior`` is a PosteriorModel or a JointPmf target (wrapped in the
    exact Bayes posterior). Trajectories are processed in chunks with
    vectorized coordinate updates; chunking and threading never change the
    result because randomness comes from per-trajectory streams.
    """
    posterior = _as_posterior(posterior, path)
    grid = _time_grid(config.h, config.t_end)
    req = sorted(set(float(t) for t in config.record_times) | {0.0, config.t_end})
    rec_idx = np.unique([int(np.argmin(np.abs(grid - t))) for t in req])
    times = grid[rec_idx]

    d = posterior.dims
    if n_trajectories == 0:
        return SimulationResult(times=times,
                                states=np.empty((0, rec_idx.size, d), dtype=np.int16),
                                final=np.empty((0, d), dtype=int),
                                seed=config.seed, config=config)

    ctx = _StepContext(posterior, path, config, grid)
    chunks = [np.arange(lo, min(lo + config.chunk_size, n_trajectories))
              for lo in range(0, n_trajectories, config.chunk_size)]

    def run(ids):
        return _simulate_chunk(path, config, ctx, d, ids, grid, rec_idx)

    if config.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ids) for ids in chunks]

    states = np.concatenate([p[0] for p in parts], axis=0)
    final = np.concatenate([p[1] for p in parts], axis=0)
    return SimulationResult(times=times, states=states, final=final,
                            seed=config.seed, config=config)


def simulate(posterior, path: ConditionalPath, config: SamplerConfig,
             n_trajectories: int) -> list[Trajectory]:
    """Ensemble simulation returning one Trajectory per index.

    Accepts a PosteriorModel or a JointPmf target, like simulate_ensemble.
    """
    return simulate_ensemble(posterior, path, config, n_trajectories).trajectories()


def corrector_stationarity(path: ConditionalPath, x1: int, t: float,
                           strength: float, h: float, n_steps: int,
                           n_particles: int, seed: int) -> Pmf:
    """Corrector-only stepping at frozen time; returns the final empirical law.

    Particles start from the exact p_t(.|x1) and evolve under the scaled
    divergence-free velocity alone, which has p_t as its steady state.
    """
    k = path.k
    p_t = path.pmf(t, x1).weights
    rng = np.random.Generator(np.random.Philox(key=seed))
    z = _inverse_cdf(np.cumsum(p_t)[None, :], rng.random(n_particles))
    cols = np.empty((k, k))
    for zz in range(k):
        cols[:, zz] = corrector_velocity_column(path, t, zz, x1)
    lam = -cols[np.arange(k), np.arange(k)] * strength
    off = np.maximum(cols, 0.0) * strength
    off[np.arange(k), np.arange(k)] = 0.0
    denom = np.where(lam > 0, lam, 1.0)
    cdf = np.cumsum(off / denom[None, :], axis=0)
    for _ in range(n_steps):
        u = rng.random((2, n_particles))
        jump = (lam[z] > 0) & (u[0] <= -np.expm1(-h * lam[z]))
        tgt = _inverse_cdf(cdf[:, z].T, u[1])
        z = np.where(jump, tgt, z)
    counts = np.bincount(z, minlength=k).astype(float)
    return Pmf(counts / counts.sum())
