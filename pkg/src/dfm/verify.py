"""Invariant battery for the configured path and velocity.

Each check reports the measured residual and its threshold; the CLI turns the
collection into a JSON report and a process exit code.
"""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig
from .core import Pmf
from .errors import DfmError
from .paths import GeodesicBridge, MixturePath
from .posterior import ExactPosterior
from .velocity import (
    WeightSpec,
    closed_form_potential,
    corrector_flux,
    divergence,
    flux_indicator,
    flux_power,
    flux_power_inf,
    flux_stable,
    laplacian_solve,
    velocity_from_flux,
)


def _flux_fn(cfg: ExperimentConfig):
    v = cfg.raw["velocity"]
    kind = v.get("flux", "stable")
    if kind == "stable":
        return flux_stable
    if kind == "indicator":
        return flux_indicator
    if kind == "power":
        alpha = float(v.get("alpha", 2.0))
        return lambda p, dp: flux_power(p, dp, alpha)
    if kind == "power_inf":
        return flux_power_inf
    raise DfmError(f"unknown flux kind {kind!r}")


def _check(name: str, residual: float, threshold: float, detail: str = "") -> dict:
    return {"name": name, "residual": float(residual),
            "threshold": float(threshold),
            "passed": bool(residual <= threshold), "detail": detail}


def run_verification(cfg: ExperimentConfig, n_probes: int = 100) -> list[dict]:
    """Battery of residual checks on the configured path/velocity/posterior."""
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    path = cfg.path()
    k = cfg.alphabet.k
    flux_fn = _flux_fn(cfg)

    probes = [(float(rng.uniform(0.01, 0.99)), int(rng.integers(k)))
              for _ in range(n_probes)]

    norm_res = dzero_res = fd_res = 0.0
    col_res = offdiag_res = cont_res = unsafe_res = 0.0
    corr_div_res = corr_stat_res = 0.0
    unsafe_count = 0
    fd_h = 1e-5
    for t, x1 in probes:
        p = path.pmf(t, x1)
        dp = path.dpmf(t, x1)
        norm_res = max(norm_res, abs(p.weights.sum() - 1.0))
        dzero_res = max(dzero_res, abs(dp.sum()))
        if 0.05 <= t <= 0.95:
            fd = (path.pmf(t + fd_h, x1).weights
                  - path.pmf(t - fd_h, x1).weights) / (2 * fd_h)
            scale = max(1.0, np.abs(dp).max())
            fd_res = max(fd_res, float(np.abs(fd - dp).max() / scale))
        j = flux_fn(p, dp)
        zero_cols = p.weights == 0
        out_of_zero = float(j.mat[:, zero_cols].sum()) if zero_cols.any() else 0.0
        if out_of_zero > 0:
            unsafe_count += 1
        unsafe_res = max(unsafe_res, out_of_zero)
        pos = p.weights > 0
        cont_res = max(cont_res, float(
            np.abs((divergence(j) + dp)[pos]).max()))
        try:
            u = velocity_from_flux(j, p)
            col_res = max(col_res, float(np.abs(u.mat.sum(axis=0)).max()))
            off = u.mat[~np.eye(k, dtype=bool)]
            offdiag_res = max(offdiag_res, max(0.0, float(-off.min())))
        except DfmError:
            pass  # unsafe flux: surfaced by the safe-flux check below
        # corrector built from the stable-weight potential on the same path
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(pos, dp / np.where(pos, p.weights, 1.0), 0.0)
        jc = corrector_flux(p, f, WeightSpec.stable())
        corr_div_res = max(corr_div_res, float(np.abs(divergence(jc)).max()))
        uc = velocity_from_flux(jc, p)
        corr_stat_res = max(corr_stat_res, float(
            np.abs(uc.mat @ p.weights).max()))

    checks = [
        _check("path_normalization", norm_res, 1e-10),
        _check("path_derivative_zero_sum", dzero_res, 1e-9),
        _check("path_derivative_finite_difference", fd_res, 1e-5),
        _check("rate_conditions_column_sums", col_res, 1e-10),
        _check("rate_conditions_nonnegative_offdiag", offdiag_res, 1e-12),
        _check("continuity_on_support", cont_res, 1e-9),
        _check("safe_flux", unsafe_res, 0.0,
               detail=f"UnsafeFlux occurrences: {unsafe_count}"
               if unsafe_count else ""),
        _check("corrector_divergence_free", corr_div_res, 1e-12),
        _check("corrector_stationarity", corr_stat_res, 1e-10),
    ]

    if isinstance(path, MixturePath):
        sched = path.scheduler
        bound = max(max(abs(sched.kappa(0.0, x1)),
                        abs(sched.kappa(1.0, x1) - 1.0)) for x1 in range(k))
        grid = np.linspace(0.0, 1.0, 1001)
        mono = 0.0
        for x1 in range(min(k, 8)):
            vals = np.array([sched.kappa(float(t), x1) for t in grid])
            mono = max(mono, max(0.0, float(-np.diff(vals).min())))
        checks.append(_check("scheduler_boundaries", bound, 1e-12))
        checks.append(_check("scheduler_monotone", mono, 1e-12))

    # potential solve agreement where the path is strictly positive
    lap_res = 0.0
    lap_pts = 0
    for t, x1 in probes[:20]:
        p = path.pmf(t, x1)
        if np.any(p.weights <= 0):
            continue
        dp = path.dpmf(t, x1)
        f1 = laplacian_solve(p, dp, WeightSpec.stable())
        f2 = closed_form_potential(p, dp, p.weights)
        lap_res = max(lap_res, float(np.abs(f1 - (f2 - f2.mean())).max()))
        lap_pts += 1
    if lap_pts:
        checks.append(_check("laplacian_vs_closed_form", lap_res, 1e-8,
                             detail=f"{lap_pts} probe points"))

    if cfg.raw["path"].get("family") == "ko":
        src = cfg.source()
        sphere = 0.0
        for x1 in range(k):
            if src.weights[x1] == 1.0:
                continue
            bridge = GeodesicBridge(src, Pmf.delta(x1, k))
            for t in np.linspace(0, 1, 101):
                a = bridge.amplitude(float(t))
                sphere = max(sphere, abs(float(a @ a) - 1.0))
        checks.append(_check("geodesic_sphere_constraint", sphere, 1e-12))

    # exact posterior sanity on the configured target
    post = ExactPosterior(cfg.target(), path)
    post_res = 0.0
    for _ in range(20):
        t = float(rng.uniform(0.05, 0.95))
        z = [int(v) for v in rng.integers(k, size=cfg.dims)]
        try:
            w = post.prob(t, z, int(rng.integers(cfg.dims))).weights
        except DfmError:
            continue
        post_res = max(post_res, abs(float(w.sum()) - 1.0),
                       max(0.0, float(-w.min())))
    checks.append(_check("posterior_normalization", post_res, 1e-12))
    return checks
