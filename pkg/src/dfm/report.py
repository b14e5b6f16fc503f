"""Figure rendering for the CLI report path.

Every report figure is written next to its delimited data file; nothing is
shown interactively (Agg backend).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, out_path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_tv_vs_t(rows: list[dict], out_path: Path, title: str = "") -> Path:
    """TV between empirical and analytic marginals against time."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ts = [r["t_or_nfe"] for r in rows]
    tvs = [r["tv"] for r in rows]
    ax.plot(ts, tvs, marker="o", lw=1.2)
    ax.set_xlabel("t")
    ax.set_ylabel("total variation")
    ax.set_ylim(bottom=0)
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3)
    return _finish(fig, out_path)


def plot_tv_vs_nfe(rows: list[dict], out_path: Path, title: str = "") -> Path:
    """Endpoint TV against number of sampler steps, log-x."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    nfes = [r["t_or_nfe"] for r in rows]
    tvs = [r["tv"] for r in rows]
    ax.plot(nfes, tvs, marker="s", lw=1.2)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("sampler steps (NFE)")
    ax.set_ylabel("total variation at t = 1")
    ax.set_ylim(bottom=0)
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3, which="both")
    return _finish(fig, out_path)


def plot_elbo_records(records: list[dict], out_path: Path,
                      title: str = "") -> Path:
    """Per-probe bound estimates with error bars and oracle markers."""
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    xs = range(len(records))
    vals = [r["elbo"] for r in records]
    errs = [r["stderr"] for r in records]
    ax.errorbar(xs, vals, yerr=errs, fmt="o", capsize=3, label="ELBO")
    oracle = [r.get("oracle") for r in records]
    if any(o is not None for o in oracle):
        ox = [i for i, o in enumerate(oracle) if o is not None]
        oy = [o for o in oracle if o is not None]
        ax.plot(ox, oy, "x", color="tab:red", label="oracle log-likelihood")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(tuple(r["x1"])) for r in records],
                       rotation=45, fontsize=7)
    ax.set_ylabel("nats")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, out_path)


def plot_loss_curve(losses: list[float], out_path: Path, window: int = 200,
                    title: str = "") -> Path:
    """Per-step training loss with a running-mean overlay."""
    import numpy as np

    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    steps = np.arange(len(losses))
    ax.plot(steps, losses, lw=0.4, alpha=0.35, label="per step")
    if len(losses) > window:
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.4, label=f"mean({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, out_path)
