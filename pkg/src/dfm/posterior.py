"""Factorized posterior models over the clean token per coordinate.

Two kinds: an exact tabular posterior computed by Bayes from a known joint
target, and a trainable tabular model fit with cross-entropy over
(time bin, joint state, coordinate) cells.
"""

from __future__ import annotations

import json

import numpy as np

from .core import JointPmf, Pmf, state_index
from .errors import SizeGuardError, ZeroMarginalError
from .paths import ConditionalPath, MixturePath

TRAINABLE_SIZE_CAP = 10**7
TRAIN_T_MAX = 1.0 - 1e-3
_STEP_STRIDE = 2**40  # counter advance per training step; bounds per-step draws


class PosteriorModel:
    """Interface: prob(t, z, i) is a Pmf over the clean token at coordinate i."""

    kind: str = "base"

    def prob(self, t: float, z, i: int) -> Pmf:
        raise NotImplementedError

    def prob_table(self, t: float) -> np.ndarray:
        """Posterior for every joint state, shape (K^D, D, K)."""
        raise NotImplementedError


class ExactPosterior(PosteriorModel):
    """Bayes posterior from a known joint target and a conditional path.

    For coordinate i, p(x1_i = a | z) is proportional to the total weight
    q(x1) prod_j p_t(z_j | x1_j) of clean states with x1_i = a.
    """

    kind = "exact"

    def __init__(self, q: JointPmf, path: ConditionalPath):
        if q.k != path.k:
            raise SizeGuardError("target and path alphabet sizes differ")
        self.q = q
        self.path = path
        self.k = q.k
        self.dims = q.dims

    def joint_weights_nd(self, t: float, z) -> np.ndarray:
        """Unnormalized joint posterior q(x1) p_t(z | x1), axes = x1 coords."""
        m = self.path.conditional_matrix(t)
        w = self.q.nd()
        for j in range(self.dims):
            shape = [1] * self.dims
            shape[j] = self.k
            w = w * m[int(z[j]), :].reshape(shape)
        return w

    def state_marginal(self, t: float, z) -> float:
        """p_t(z) under the marginal path."""
        return float(self.joint_weights_nd(t, z).sum())

    def prob(self, t, z, i):
        w = self.joint_weights_nd(t, z)
        num = w.sum(axis=tuple(j for j in range(self.dims) if j != i))
        total = num.sum()
        if total <= 0:
            raise ZeroMarginalError(
                f"state {tuple(int(v) for v in z)} unreachable at t = {t}")
        return Pmf(num / total)

    def prob_table(self, t):
        m = self.path.conditional_matrix(t)
        q_nd = self.q.nd()
        k, d = self.k, self.dims
        out = np.zeros((k**d, d, k))
        for i in range(d):
            num = _posterior_numerators(q_nd, m, i)
            tot = num.sum(axis=1, keepdims=True)
            np.divide(num, tot, out=out[:, i, :], where=tot > 0)
        return out


def _posterior_numerators(q_nd: np.ndarray, m: np.ndarray, i: int) -> np.ndarray:
    """Coordinate-i posterior numerators at every state, shape (K^D, K).

    ``m[x, x1]`` is the per-coordinate conditional path matrix. Each clean-token
    axis j != i of the target table is contracted against m into an axis over
    the current token z_j; the coordinate-i factor m[z_i, x1_i] is multiplied
    in last. States are laid out flat with coordinate 0 fastest.
    """
    d = q_nd.ndim
    k = q_nd.shape[0]
    w = q_nd
    for j in range(d):
        if j != i:
            w = np.moveaxis(np.tensordot(m, w, axes=([1], [j])), 0, j)
    w = np.moveaxis(w, i, -1)  # axes: z_j for j != i, then x1_i
    w = np.expand_dims(w, i) * m.reshape(
        (1,) * i + (k,) + (1,) * (d - 1 - i) + (k,))
    # axes now (z_0, .., z_{D-1}, x1_i); Fortran reshape keeps z_0 fastest
    return w.reshape((k**d, k), order="F")


def exact_posterior(q: JointPmf, path: ConditionalPath, t: float, z,
                    i: int) -> Pmf:
    """One-shot Bayes posterior evaluation; see ExactPosterior."""
    return ExactPosterior(q, path).prob(t, z, i)


def marginal_joint(q: JointPmf, path: ConditionalPath, t: float) -> JointPmf:
    """Analytic time-t marginal sum_x1 q(x1) prod_i p_t(x_i | x1_i)."""
    m = path.conditional_matrix(t)
    w = q.nd()
    for j in range(q.dims):
        w = np.moveaxis(np.tensordot(m, w, axes=([1], [j])), 0, j)
    return JointPmf.from_nd(w)


class TrainableTabular(PosteriorModel):
    """Tabular posterior with logits of shape (bins, K^D, D, K).

    Time lookups snap to the containing bin (centered at (b + 1/2)/bins); the
    softmax over the last axis defines the per-coordinate posterior.
    """

    kind = "trainable"

    def __init__(self, k: int, dims: int, bins: int,
                 logits: np.ndarray | None = None):
        n_states = k**dims
        if bins * n_states * dims * k > TRAINABLE_SIZE_CAP:
            raise SizeGuardError(
                f"tabular size {bins * n_states * dims * k} exceeds cap")
        self.k = k
        self.dims = dims
        self.bins = bins
        if logits is None:
            logits = np.zeros((bins, n_states, dims, k))
        self.logits = np.asarray(logits, dtype=float).reshape(
            (bins, n_states, dims, k))

    def bin_of(self, t) -> np.ndarray:
        idx = np.floor(np.asarray(t, dtype=float) * self.bins).astype(int)
        return np.clip(idx, 0, self.bins - 1)

    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.bins) + 0.5) / self.bins

    def prob(self, t, z, i):
        b = int(self.bin_of(t))
        row = self.logits[b, state_index(z, self.k), i]
        e = np.exp(row - row.max())
        return Pmf(e / e.sum())

    def prob_table(self, t):
        rows = self.logits[int(self.bin_of(t))]
        e = np.exp(rows - rows.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def to_json(self) -> dict:
        return {"bins": self.bins, "dims": self.dims, "k": self.k,
                "logits": self.logits.reshape(-1).tolist()}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @staticmethod
    def from_json(data: dict) -> "TrainableTabular":
        return TrainableTabular(int(data["k"]), int(data["dims"]),
                                int(data["bins"]),
                                np.asarray(data["logits"], dtype=float))

    @staticmethod
    def load(path) -> "TrainableTabular":
        with open(path) as fh:
            return TrainableTabular.from_json(json.load(fh))


def ce_loss(model: TrainableTabular, batch):
    """Cross-entropy loss and logit gradient on (t, x1, x_t) triples.

    Returns the mean over the batch of the per-sample sum over coordinates of
    -log p(x1_i | x_t), and a dense gradient array shaped like the logits
    (softmax minus one-hot at each visited cell, averaged over the batch).
    """
    grad = np.zeros_like(model.logits)
    total = 0.0
    n = len(batch)
    for t, x1, x_t in batch:
        b = int(model.bin_of(t))
        s = state_index(x_t, model.k)
        rows = model.logits[b, s] - model.logits[b, s].max(axis=-1, keepdims=True)
        logz = np.log(np.exp(rows).sum(axis=-1))
        for i in range(model.dims):
            total += logz[i] - rows[i, int(x1[i])]
            soft = np.exp(rows[i] - logz[i])
            soft[int(x1[i])] -= 1.0
            grad[b, s, i] += soft / n
    return total / n, grad


def _decode_states(flat: np.ndarray, k: int, d: int) -> np.ndarray:
    return np.stack([(flat // k**i) % k for i in range(d)], axis=1)


def _sample_path_tokens(path: ConditionalPath, ts: np.ndarray, x1: np.ndarray,
                        u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws x_t ~ p_t(.|x1) per coordinate, one uniform each."""
    if isinstance(path, MixturePath):
        sched = path.scheduler
        kap = np.empty_like(u)
        for i in range(x1.shape[1]):
            kap[:, i] = _kappa_batch(sched, ts, x1[:, i])
        src_cdf = np.cumsum(path.source.weights)
        jump = u < kap
        # rescale the remaining uniform mass onto the source CDF
        v = np.clip((u - kap) / np.maximum(1.0 - kap, 1e-300), 0.0, 1.0 - 1e-16)
        from_src = np.minimum(path.k - 1, np.searchsorted(src_cdf, v, side="right"))
        return np.where(jump, x1, from_src)
    out = np.empty_like(x1)
    for s in range(len(ts)):
        cdf = np.cumsum(path.conditional_matrix(float(ts[s])), axis=0)
        for i in range(x1.shape[1]):
            out[s, i] = min(path.k - 1,
                            int(np.searchsorted(cdf[:, x1[s, i]], u[s, i])))
    return out


def _kappa_batch(sched, ts: np.ndarray, x1s: np.ndarray) -> np.ndarray:
    kind = getattr(sched, "kind", None)
    if kind == "linear":
        return np.asarray(ts, dtype=float)
    if kind == "cubic":
        return np.asarray(ts, dtype=float) ** 3
    if kind == "kinetic_optimal":
        return sched._kappa_omega_batch(ts, x1s)
    return np.array([sched.kappa(float(t), int(x)) for t, x in zip(ts, x1s)])


def train_posterior(q: JointPmf, path: ConditionalPath, steps: int,
                    lr: float = 1.0, seed: int = 0, bins: int = 32,
                    batch_size: int = 64, start_step: int = 0,
                    init_model: TrainableTabular | None = None,
                    loss_log: list | None = None) -> TrainableTabular:
    """Fit the tabular posterior by SGD on the cross-entropy objective.

    Deterministic per seed: step k draws from a counter-based stream advanced
    to a fixed per-step offset, so training can resume from a saved model at
    ``start_step`` and reproduce the continued loss curve. Times are sampled
    in [0, 1 - 1e-3]; the optimizer is plain SGD with a constant rate.
    """
    model = init_model or TrainableTabular(q.k, q.dims, bins)
    if model.k != q.k or model.dims != q.dims:
        raise SizeGuardError("model shape does not match target")
    if init_model is not None and init_model.bins != bins:
        raise SizeGuardError("model bin count does not match request")
    k, d = q.k, q.dims
    powers = k ** np.arange(d)

    for step in range(start_step, start_step + steps):
        rng = np.random.Generator(
            np.random.Philox(key=seed).advance(step * _STEP_STRIDE))
        ts = rng.random(batch_size) * TRAIN_T_MAX
        flat = rng.choice(q.n_states, size=batch_size, p=q.table)
        u = rng.random((batch_size, d))

        x1 = _decode_states(flat, k, d)
        x_t = _sample_path_tokens(path, ts, x1, u)
        b_idx = model.bin_of(ts)
        s_idx = (x_t * powers).sum(axis=1)

        rows = model.logits[b_idx, s_idx]  # (B, D, K) gather-copy
        rows -= rows.max(axis=-1, keepdims=True)
        soft = np.exp(rows)
        soft /= soft.sum(axis=-1, keepdims=True)
        if loss_log is not None:
            picked = np.take_along_axis(soft, x1[..., None], axis=-1)[..., 0]
            loss_log.append(
                float(-np.log(np.maximum(picked, 1e-300)).sum(axis=1).mean()))
        soft[np.arange(batch_size)[:, None], np.arange(d)[None, :], x1] -= 1.0
        np.subtract.at(model.logits, (b_idx, s_idx), (lr / batch_size) * soft)
    return model
