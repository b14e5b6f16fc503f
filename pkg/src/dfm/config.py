"""Experiment configuration: one JSON document with dotted-path overrides.

The config owns cross-field consistency (a mask source needs a mask token,
the source-dependent scheduler needs a source) and builds the concrete
alphabet, target, path, and sampler objects used by the subcommands.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .core import Alphabet, JointPmf, Metric, Pmf, absolute_metric
from .datasets import ToySpec, make_toy
from .errors import ConfigError
from .paths import (
    BetaSchedule,
    ConditionalPath,
    make_scheduler,
    metric_path,
    mixture_path,
    tempered_source,
)
from .sampler import SamplerConfig

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "alphabet": {"k": 4, "mask_token": None},
    "dims": 2,
    "target": {"kind": "random_sparse", "sparsity": 0.4, "seed": 11},
    "path": {
        "family": "mixture",
        "scheduler": {"kind": "linear"},
        "source": {"kind": "uniform"},
        "beta": {"c": 2.0, "a": 2.0},
        "metric": "absolute",
    },
    "velocity": {"flux": "stable", "alpha": 2.0, "corrector_strength": 0.0},
    "sampler": {
        "h": 0.002,
        "t_end": 1.0 - 1e-3,
        "scheme": "always_valid",
        "final_denoise": True,
        "n_trajectories": 2000,
        "record_times": [0.25, 0.5, 0.75],
        "nfe_sweep": [],
    },
    "elbo": {"n_samples": 2000, "t_cutoff": 1.0 - 1e-3,
             "use_kappa_cov": False, "n_probes": 5, "probes": None},
    "train": {"steps": 2000, "lr": 1.0, "bins": 32, "batch_size": 64},
    "output": {"directory": "out", "formats": ["csv", "json"], "figures": True},
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_set_override(raw: dict, expr: str) -> dict:
    """Apply one ``a.b.c=value`` override; values parse as JSON when possible."""
    if "=" not in expr:
        raise ConfigError(f"override {expr!r} is not of the form key=value")
    dotted, text = expr.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value
    return raw


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


@dataclass
class ExperimentConfig:
    """Validated experiment description plus the raw document and its hash."""

    raw: dict
    alphabet: Alphabet
    dims: int
    seed: int
    hash: str = field(default="")

    def __post_init__(self):
        if not self.hash:
            self.hash = config_hash(self.raw)

    # ---- builders -----------------------------------------------------

    def target(self) -> JointPmf:
        t = self.raw["target"]
        if "file" in t and t["file"]:
            with open(t["file"]) as fh:
                return JointPmf.from_json(json.load(fh))
        if "table" in t and t["table"] is not None:
            return JointPmf(self.alphabet.k, self.dims,
                            np.asarray(t["table"], dtype=float))
        spec = ToySpec(kind=t["kind"], k=self.alphabet.k, dims=self.dims,
                       seed=int(t.get("seed", self.seed)),
                       sparsity=float(t.get("sparsity", 0.25)),
                       transition=t.get("transition"),
                       mask_token=self.alphabet.mask_token)
        return make_toy(spec)

    def source(self) -> Pmf:
        s = self.raw["path"].get("source") or {"kind": "uniform"}
        kind = s.get("kind", "uniform")
        k = self.alphabet.k
        if kind == "uniform":
            return Pmf.uniform(k)
        if kind == "mask":
            if self.alphabet.mask_token is None:
                raise ConfigError("mask source requires alphabet.mask_token")
            return Pmf.delta(self.alphabet.mask_token, k)
        if kind == "explicit":
            w = s.get("weights")
            if w is None or len(w) != k:
                raise ConfigError("explicit source needs K weights")
            return Pmf(np.asarray(w, dtype=float))
        if kind == "tempered":
            stats = s.get("stats")
            if stats is None:
                stats = self.target_token_stats().weights
            return tempered_source(Pmf(np.asarray(stats, dtype=float)),
                                   float(s.get("beta0", 0.0)))
        raise ConfigError(f"unknown source kind {kind!r}")

    def target_token_stats(self) -> Pmf:
        """Per-token frequency of the target, floored off zero for tempering."""
        q = self.target()
        stats = np.zeros(self.alphabet.k)
        for i in range(self.dims):
            stats += q.coordinate_marginal(i).weights
        stats = stats / stats.sum()
        floor = 1e-6
        stats = (stats + floor) / (1.0 + floor * self.alphabet.k)
        return Pmf(stats)

    def metric(self) -> Metric:
        name = self.raw["path"].get("metric", "absolute")
        if name == "absolute":
            return absolute_metric()
        raise ConfigError(f"unknown metric {name!r}")

    def path(self) -> ConditionalPath:
        p = self.raw["path"]
        family = p.get("family", "mixture")
        if family == "mixture":
            sched_cfg = p.get("scheduler") or {"kind": "linear"}
            kind = sched_cfg.get("kind", "linear")
            source = self.source()
            sched = make_scheduler(kind, source if kind == "kinetic_optimal"
                                   else None)
            return mixture_path(source, sched, self.alphabet)
        if family == "ko":
            source = self.source()
            return mixture_path(source, make_scheduler("kinetic_optimal", source),
                                self.alphabet)
        if family == "metric":
            beta_cfg = p.get("beta") or {}
            beta = BetaSchedule(c=float(beta_cfg.get("c", 1.0)),
                                a=float(beta_cfg.get("a", 1.0)))
            return metric_path(self.metric(), beta, self.alphabet)
        raise ConfigError(f"unknown path family {family!r}")

    def sampler_config(self, threads: int = 1) -> SamplerConfig:
        s = self.raw["sampler"]
        return SamplerConfig(
            h=float(s.get("h", 0.002)),
            t_end=float(s.get("t_end", 1.0 - 1e-3)),
            corrector_strength=float(
                self.raw["velocity"].get("corrector_strength", 0.0)),
            scheme=s.get("scheme", "always_valid"),
            final_denoise=bool(s.get("final_denoise", True)),
            seed=self.seed,
            record_times=tuple(float(t) for t in s.get("record_times", [])),
            threads=threads,
        )


def load_config(path: str | None = None, sets: tuple = (),
                seed: int | None = None) -> ExperimentConfig:
    """Merge defaults, an optional JSON file, and --set overrides; validate."""
    raw = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        raw = _deep_merge(raw, user)
    for expr in sets:
        raw = parse_set_override(raw, expr)
    if seed is not None:
        raw["seed"] = int(seed)
    return validate_config(raw)


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        a = raw["alphabet"]
        mask = a.get("mask_token")
        alphabet = Alphabet(int(a["k"]),
                            None if mask is None else int(mask))
        dims = int(raw["dims"])
        if dims < 1:
            raise ConfigError("dims must be positive")
        cfg = ExperimentConfig(raw=raw, alphabet=alphabet, dims=dims,
                               seed=int(raw.get("seed", 0)))
        # cross-field checks: fail fast rather than deep in a run
        cfg.path()
        cfg.sampler_config()
        if not 0.0 < float(raw["elbo"].get("t_cutoff", 0.999)) < 1.0:
            raise ConfigError("elbo.t_cutoff outside (0, 1)")
        return cfg
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
