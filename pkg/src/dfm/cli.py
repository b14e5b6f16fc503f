"""Command-line driver: verify, sample, elbo, and train subcommands.

Every run is deterministic given (config, seed); all output files carry the
tool version and the config hash in their header. Exit codes: 0 success,
1 failed check or runtime contract violation, 2 usage or config error.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .core import JointPmf, empirical_joint, tv_distance
from .elbo import ORACLE_SIZE_CAP, elbo_estimate, exact_loglik_oracle
from .errors import ConfigError, DfmError
from .paths import MixturePath
from .posterior import ExactPosterior, TrainableTabular, marginal_joint, train_posterior
from .sampler import SamplerConfig, simulate_ensemble
from .velocity import conditional_velocity_matrix, flux_stable
from .verify import run_verification

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2


def _meta(cfg: ExperimentConfig) -> dict:
    return {"tool": "dfm", "version": __version__, "config_hash": cfg.hash,
            "seed": cfg.seed}


def _header_line(cfg: ExperimentConfig) -> str:
    return f"# dfm {__version__} config_hash={cfg.hash} seed={cfg.seed}"


def _write_csv(path: Path, columns: list[str], rows: list[dict],
               cfg: ExperimentConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header_line(cfg) + "\n")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in columns})


def _write_json(path: Path, payload: dict, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump({"meta": _meta(cfg), **payload}, fh, indent=2)
        fh.write("\n")


def _write_jsonl(path: Path, records: list[dict], cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"meta": _meta(cfg)}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    env = os.environ.get("DFM_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"DFM_THREADS={env!r} is not an integer")


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(),
                      default=None, help="JSON experiment config.")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                      help="Dotted-path config override, e.g. path.family=metric.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None,
                      help="Output directory (default: config output.directory).")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--threads", type=int, default=None,
                      help="Worker threads (env DFM_THREADS as fallback).")(fn)
    fn = click.option("--dump-rates", is_flag=True,
                      help="Dump rate/flux matrices for debugging.")(fn)
    return fn


def _setup(config_path, sets, out_dir, seed, threads):
    cfg = load_config(config_path, sets, seed)
    out = Path(out_dir or cfg.raw["output"].get("directory", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out, _resolve_threads(threads)


def _dump_rates(cfg: ExperimentConfig, out: Path) -> None:
    path = cfg.path()
    records = []
    for t in (0.25, 0.5, 0.75):
        for x1 in range(min(cfg.alphabet.k, 4)):
            u = conditional_velocity_matrix(path, t, x1)
            j = flux_stable(path.pmf(t, x1), path.dpmf(t, x1))
            records.append({"t": t, "x1": x1, "rate_matrix": u.to_json(),
                            "flux": j.to_json()})
    _write_json(out / "rates.json", {"rates": records}, cfg)


def _figures_enabled(cfg: ExperimentConfig) -> bool:
    return bool(cfg.raw["output"].get("figures", True))


@click.group()
@click.version_option(__version__, prog_name="dfm")
def main():
    """Discrete flow matching engine: paths, velocities, samplers, bounds."""


@main.command()
@common_options
def verify(config_path, sets, out_dir, seed, threads, dump_rates):
    """Run the invariant battery for the configured path and velocity."""
    try:
        cfg, out, _ = _setup(config_path, sets, out_dir, seed, threads)
        checks = run_verification(cfg)
        if dump_rates:
            _dump_rates(cfg, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    passed = all(c["passed"] for c in checks)
    report = {"passed": passed, "checks": checks}
    _write_json(out / "verify.json", report, cfg)
    for c in checks:
        status = "ok" if c["passed"] else "FAIL"
        click.echo(f"{status:4s} {c['name']}: residual {c['residual']:.3e} "
                   f"(threshold {c['threshold']:.1e})"
                   + (f"  [{c['detail']}]" if c.get("detail") else ""))
    click.echo(json.dumps({"meta": _meta(cfg), "passed": passed}))
    sys.exit(EXIT_OK if passed else EXIT_CHECK_FAILED)


@main.command()
@common_options
@click.option("--record-path", "record_path", default=None,
              help="Comma-separated times whose states are stored per trajectory.")
def sample(config_path, sets, out_dir, seed, threads, dump_rates, record_path):
    """Simulate trajectories; write JSONL plus TV-vs-t and TV-vs-NFE reports."""
    try:
        cfg, out, n_threads = _setup(config_path, sets, out_dir, seed, threads)
        extra_times = tuple(float(v) for v in record_path.split(",")) \
            if record_path else ()
    except (ConfigError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        q = cfg.target()
        path = cfg.path()
        posterior = ExactPosterior(q, path)
        scfg = cfg.sampler_config(threads=n_threads)
        if extra_times:
            scfg = SamplerConfig(**{**scfg.__dict__,
                                    "record_times": tuple(
                                        set(scfg.record_times) | set(extra_times))})
        n = int(cfg.raw["sampler"].get("n_trajectories", 1000))
        res = simulate_ensemble(posterior, path, scfg, n)

        records = []
        for idx in range(n):
            rec = {"seed": cfg.seed, "index": idx,
                   "final": [int(v) for v in res.final[idx]]}
            if extra_times:
                rec["states"] = {
                    f"{res.times[j]:.6f}": [int(v) for v in res.states[idx, j]]
                    for j in range(res.times.size)}
            records.append(rec)
        _write_jsonl(out / "trajectories.jsonl", records, cfg)

        columns = ["t_or_nfe", "tv", "n", "h", "scheme"]
        tv_rows = []
        for j, t in enumerate(res.times):
            emp = empirical_joint(res.states[:, j, :], cfg.dims, cfg.alphabet)
            ana = marginal_joint(q, path, float(t))
            tv_rows.append({"t_or_nfe": float(t), "tv": tv_distance(emp, ana),
                            "n": n, "h": scfg.h, "scheme": scfg.scheme})
        emp_final = empirical_joint(res.final, cfg.dims, cfg.alphabet)
        tv_rows.append({"t_or_nfe": 1.0, "tv": tv_distance(emp_final, q),
                        "n": n, "h": scfg.h, "scheme": scfg.scheme})
        _write_csv(out / "tv_vs_t.csv", columns, tv_rows, cfg)

        nfe_rows = []
        for nfe in cfg.raw["sampler"].get("nfe_sweep", []) or []:
            h_nfe = scfg.t_end / int(nfe)
            cfg_nfe = SamplerConfig(**{**scfg.__dict__, "h": h_nfe,
                                       "record_times": ()})
            res_nfe = simulate_ensemble(posterior, path, cfg_nfe, n)
            emp = empirical_joint(res_nfe.final, cfg.dims, cfg.alphabet)
            nfe_rows.append({"t_or_nfe": int(nfe), "tv": tv_distance(emp, q),
                             "n": n, "h": h_nfe, "scheme": scfg.scheme})
        if nfe_rows:
            _write_csv(out / "tv_vs_nfe.csv", columns, nfe_rows, cfg)

        if _figures_enabled(cfg):
            from . import report
            report.plot_tv_vs_t(tv_rows[:-1], out / "tv_vs_t.png",
                                title=f"marginal TV (config {cfg.hash})")
            if nfe_rows:
                report.plot_tv_vs_nfe(nfe_rows, out / "tv_vs_nfe.png",
                                      title=f"endpoint TV vs NFE (config {cfg.hash})")
        if dump_rates:
            _dump_rates(cfg, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except DfmError as exc:
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(EXIT_CHECK_FAILED)
    click.echo(json.dumps({"meta": _meta(cfg), "trajectories": n,
                           "tv_final": tv_rows[-1]["tv"]}))
    sys.exit(EXIT_OK)


def _load_posterior(cfg: ExperimentConfig, q: JointPmf, path):
    model_file = cfg.raw["elbo"].get("model_file")
    if model_file:
        return TrainableTabular.load(model_file)
    return ExactPosterior(q, path)


@main.command()
@common_options
def elbo(config_path, sets, out_dir, seed, threads, dump_rates):
    """Estimate the likelihood bound per probe state; JSON records out."""
    try:
        cfg, out, _ = _setup(config_path, sets, out_dir, seed, threads)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        q = cfg.target()
        path = cfg.path()
        posterior = _load_posterior(cfg, q, path)
        ecfg = cfg.raw["elbo"]
        probes = ecfg.get("probes")
        if probes is None:
            support = q.support()
            rng = np.random.Generator(np.random.Philox(key=cfg.seed))
            n_probes = min(int(ecfg.get("n_probes", 5)), len(support))
            pick = rng.choice(len(support), size=n_probes, replace=False)
            probes = [support[i].tolist() for i in pick]
        records = []
        oracle_ok = (q.n_states <= ORACLE_SIZE_CAP
                     and isinstance(path, MixturePath))
        for j, x1 in enumerate(probes):
            est = elbo_estimate(
                x1, path, posterior,
                n_samples=int(ecfg.get("n_samples", 2000)),
                t_cutoff=float(ecfg.get("t_cutoff", 1.0 - 1e-3)),
                use_kappa_cov=bool(ecfg.get("use_kappa_cov", False)),
                seed=cfg.seed + j)
            oracle = exact_loglik_oracle(q, path, posterior, x1) \
                if oracle_ok else None
            rec = {"x1": [int(v) for v in x1], "elbo": est.value,
                   "stderr": est.std_error, "oracle": oracle}
            records.append(rec)
            click.echo(json.dumps(rec))
        _write_jsonl(out / "elbo.jsonl", records, cfg)
        if _figures_enabled(cfg) and records:
            from . import report
            report.plot_elbo_records(records, out / "elbo.png",
                                     title=f"bound per probe (config {cfg.hash})")
        if dump_rates:
            _dump_rates(cfg, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except DfmError as exc:
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(EXIT_CHECK_FAILED)
    sys.exit(EXIT_OK)


@main.command()
@common_options
def train(config_path, sets, out_dir, seed, threads, dump_rates):
    """Fit the tabular posterior by cross-entropy; write model and loss curve."""
    try:
        cfg, out, _ = _setup(config_path, sets, out_dir, seed, threads)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        q = cfg.target()
        path = cfg.path()
        tcfg = cfg.raw["train"]
        init_model = None
        start_step = int(tcfg.get("start_step", 0))
        if tcfg.get("init_model"):
            init_model = TrainableTabular.load(tcfg["init_model"])
        losses: list[float] = []
        model = train_posterior(
            q, path, steps=int(tcfg.get("steps", 2000)),
            lr=float(tcfg.get("lr", 1.0)), seed=cfg.seed,
            bins=int(tcfg.get("bins", 32)),
            batch_size=int(tcfg.get("batch_size", 64)),
            start_step=start_step, init_model=init_model, loss_log=losses)
        model.save(out / "model.json")
        rows = [{"step": start_step + i, "loss": loss}
                for i, loss in enumerate(losses)]
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            fh.write(_header_line(cfg) + "\n")
            writer = csv.DictWriter(fh, fieldnames=["step", "loss"])
            writer.writeheader()
            writer.writerows(rows)
        if _figures_enabled(cfg) and losses:
            from . import report
            report.plot_loss_curve(losses, out / "loss_curve.png",
                                   title=f"training loss (config {cfg.hash})")
        if dump_rates:
            _dump_rates(cfg, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except DfmError as exc:
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(EXIT_CHECK_FAILED)
    click.echo(json.dumps({"meta": _meta(cfg), "steps": len(losses),
                           "final_loss": losses[-1] if losses else None}))
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
