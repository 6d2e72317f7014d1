"""Time-conditioned score estimation from snapshot data via score matching.

The score network takes (x, t) with x standardized per dimension and t
mapped affinely to [-1, 1] (sine activations are scale sensitive). The
objective is the classic implicit score-matching loss per snapshot,
tr(grad s) + |s|^2 / 2, with the trace either exact (small d) or sliced
with Rademacher projections through the network's tangent pass.
"""

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import nn
from .numkit import DimensionMismatch, RngStream


class Diverged(RuntimeError):
    pass


@dataclass
class ScoreWeights:
    """Positive per-snapshot weights for the score-matching objective."""

    lambda_k: np.ndarray

    def __post_init__(self):
        self.lambda_k = np.asarray(self.lambda_k, dtype=float)
        if np.any(self.lambda_k <= 0):
            raise ValueError("all snapshot weights must be positive")

    @classmethod
    def uniform(cls, k):
        return cls(np.ones(k))


@dataclass
class ScoreConfig:
    hidden: tuple = (20, 20, 20)
    w0: float = 1.0
    epochs: int = 300
    lr: float = 3e-3
    batch_size: int = 4096  # effectively full batch at typical snapshot sizes
    n_slices: int = 1
    exact_trace: bool = True  # exact tr(grad s); sensible for d <= 6
    val_fraction: float = 0.1
    patience: int = 300
    lambda_floor: float = 0.01
    adaptive_lambda: bool = True
    smoothness_penalty: float = 1.0
    seed: int = 0


class TrainedScore:
    """s~(x, t): a trained MLP plus the normalizations baked around it.

    The network is the score of the standardized variable z = (x - mean)/std
    (training in z keeps the objective scale-free); the x-space score is the
    network output divided per dimension by std.
    """

    def __init__(self, net, t_lo, t_hi, x_mean, x_std, lambdas=None, report=None):
        self.net = net
        self.t_lo = float(t_lo)
        self.t_hi = float(t_hi)
        self.x_mean = np.asarray(x_mean, dtype=float)
        self.x_std = np.asarray(x_std, dtype=float)
        self.lambdas = lambdas
        self.report = report or {}

    @property
    def dim(self):
        return self.net.d_out

    def _t_norm(self, t):
        if self.t_hi > self.t_lo:
            return 2.0 * (t - self.t_lo) / (self.t_hi - self.t_lo) - 1.0
        return np.zeros_like(np.asarray(t, dtype=float))

    def _inputs(self, x, t):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        if xb.shape[1] != self.dim:
            raise DimensionMismatch(f"expected dim {self.dim}")
        tb = np.broadcast_to(np.asarray(t, dtype=float), (xb.shape[0],))
        xn = (xb - self.x_mean) / self.x_std
        return np.column_stack([xn, self._t_norm(tb)])

    def value(self, x, t):
        single = np.asarray(x).ndim == 1
        out = nn.forward(self.net, self._inputs(x, t)) / self.x_std
        return out[0] if single else out

    def x_jacobian(self, x, t):
        """d s / d x, shape (N, d, d); the time column is dropped."""
        single = np.asarray(x).ndim == 1
        jac = nn.input_jacobian(self.net, self._inputs(x, t))
        jac = jac[..., : self.dim] / (self.x_std[None, :, None] * self.x_std[None, None, :])
        return jac[0] if single else jac

    def x_vjp(self, x, t, cotangent):
        """(ds/dx)^T w for each sample; used by the flow adjoint."""
        single = np.asarray(x).ndim == 1
        z = self._inputs(x, t)
        _, cache = nn.forward_cache(self.net, z)
        wb = np.atleast_2d(np.asarray(cotangent, dtype=float)) / self.x_std
        _, zbar = nn.backward(self.net, cache, wb)
        out = zbar[:, : self.dim] / self.x_std[None, :]
        return out[0] if single else out

    def save(self, model_path, meta_path, dataset_fingerprint=None):
        nn.save_model(self.net, model_path)
        meta = {
            "t_lo": self.t_lo,
            "t_hi": self.t_hi,
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "lambdas": None if self.lambdas is None else np.asarray(self.lambdas).tolist(),
            "report": self.report,
            "dataset_fingerprint": dataset_fingerprint,
        }
        with open(meta_path, "w") as fh:
            json.dump(meta, fh)

    @classmethod
    def load(cls, model_path, meta_path):
        net = nn.load_model(model_path)
        with open(meta_path) as fh:
            meta = json.load(fh)
        score = cls(
            net,
            meta["t_lo"],
            meta["t_hi"],
            np.asarray(meta["x_mean"]),
            np.asarray(meta["x_std"]),
            lambdas=meta.get("lambdas"),
            report=meta.get("report", {}),
        )
        score.dataset_fingerprint = meta.get("dataset_fingerprint")
        return score


class AnalyticScore:
    """Closed-form score wrapper with the same evaluation surface."""

    def __init__(self, value_fn, jacobian_fn=None):
        self._value = value_fn
        self._jac = jacobian_fn

    def value(self, x, t):
        return self._value(np.asarray(x, dtype=float), t)

    def x_jacobian(self, x, t):
        if self._jac is None:
            raise NotImplementedError("no analytic Jacobian provided")
        return self._jac(np.asarray(x, dtype=float), t)

    def x_vjp(self, x, t, cotangent):
        jac = self.x_jacobian(x, t)
        w = np.asarray(cotangent, dtype=float)
        if w.ndim == 1:
            return jac.T @ w
        return np.einsum("nij,ni->nj", jac, w)


def _trace_exact(score, xb, t):
    jac = score.x_jacobian(xb, t)
    return np.trace(jac, axis1=1, axis2=2)


def sm_objective_exact(score, dataset, weights=None):
    """Sum_k lambda_k E_k[tr(grad s) + |s|^2 / 2] with the exact trace."""
    if weights is None:
        weights = ScoreWeights.uniform(dataset.n_snapshots)
    total = 0.0
    for k, snap in enumerate(dataset.snapshots):
        tr = _trace_exact(score, snap, dataset.times[k])
        s = score.value(snap, dataset.times[k])
        total += weights.lambda_k[k] * float(np.mean(tr + 0.5 * np.sum(s * s, axis=1)))
    return total


def sm_objective_sliced(score, dataset, weights=None, n_slices=1, rng=None):
    """Hutchinson-sliced variant: tr(grad s) ~ mean_v v^T (grad s) v, Rademacher v."""
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    if rng is None:
        rng = RngStream(0)
    if weights is None:
        weights = ScoreWeights.uniform(dataset.n_snapshots)
    total = 0.0
    for k, snap in enumerate(dataset.snapshots):
        t = dataset.times[k]
        s = score.value(snap, t)
        tr_est = np.zeros(len(snap))
        for _ in range(n_slices):
            v = rng.rademacher(snap.shape)
            sv = score_jvp(score, snap, t, v)
            tr_est += np.sum(v * sv, axis=1)
        tr_est /= n_slices
        total += weights.lambda_k[k] * float(np.mean(tr_est + 0.5 * np.sum(s * s, axis=1)))
    return total


def score_jvp(score, x, t, v):
    """(ds/dx) v for each sample, via the network tangent pass when available."""
    if isinstance(score, TrainedScore):
        z = score._inputs(x, t)
        vz = np.column_stack([np.atleast_2d(v) / score.x_std, np.zeros(len(z))])
        _, dy, _ = nn.forward_tangent(score.net, z, vz)
        return dy / score.x_std
    jac = score.x_jacobian(x, t)
    return np.einsum("nij,nj->ni", jac, np.atleast_2d(v))


def train_score(dataset, config=None):
    """Fit a time-conditioned score to the snapshots by Adam on Eq.-style SM loss.

    Per-snapshot weights start at 1 and, when adaptive_lambda is on, are
    re-estimated each epoch as 1 / (mean |s|^2 over that snapshot + floor)
    so no single snapshot dominates the gradient. A 90/10 split with early
    stopping on the validation objective picks the returned parameters.

    The raw implicit objective is unbounded below for a flexible network on
    a finite sample: the net can carve high-frequency wiggles with very
    negative trace at exactly the sample points. smoothness_penalty adds
    eta * E |J(x) - Jbar|_F^2 with Jbar the per-snapshot batch mean of the
    score Jacobian. The penalty vanishes on score fields that are linear in
    x within each snapshot, so it does not bias near-Gaussian targets, but
    it strongly suppresses the oscillatory escape direction.
    """
    if config is None:
        config = ScoreConfig()
    d = dataset.dim
    times = dataset.times
    pooled = dataset.pooled()
    x_mean = pooled.mean(axis=0)
    x_std = np.maximum(pooled.std(axis=0), 1e-6)

    rng = RngStream(config.seed, 7001)
    net = nn.MlpModel([d + 1, *config.hidden, d], w0=config.w0, rng=rng)
    net.weights[-1][:] = 0.0  # start at s = 0, the scale-free origin of the loss
    score = TrainedScore(net, times[0], times[-1], x_mean, x_std)

    # flatten samples with per-sample time and snapshot index
    xs, ts, ks = [], [], []
    for k, snap in enumerate(dataset.snapshots):
        xs.append(snap)
        ts.append(np.full(len(snap), times[k]))
        ks.append(np.full(len(snap), k, dtype=int))
    xs = np.concatenate(xs)
    ts = np.concatenate(ts)
    ks = np.concatenate(ks)

    split_rng = RngStream(config.seed, 7002)
    val_mask = np.zeros(len(xs), dtype=bool)
    for k in range(dataset.n_snapshots):
        idx = np.where(ks == k)[0]
        n_val = max(1, int(round(config.val_fraction * len(idx)))) if config.val_fraction > 0 else 0
        if n_val:
            val_mask[idx[split_rng.permutation(len(idx))[:n_val]]] = True
    train_idx = np.where(~val_mask)[0]
    val_idx = np.where(val_mask)[0]

    lambdas = np.ones(dataset.n_snapshots)
    adam = nn.AdamState.for_params(net.params(), lr=config.lr)
    batch_rng = RngStream(config.seed, 7003)
    slice_rng = RngStream(config.seed, 7004)

    xn_all = (xs - x_mean) / x_std
    tn_all = score._t_norm(ts)
    inputs_all = np.column_stack([xn_all, tn_all])

    best_val = np.inf
    best_params = net.params_flat()
    best_epoch = -1
    lambda_history = [lambdas.copy()]
    loss_history = []
    d_cols = d

    eta = config.smoothness_penalty

    def centered_rows(rows, groups):
        """Subtract the per-snapshot mean from stacked Jacobian rows."""
        out = rows.copy()
        for k in np.unique(groups):
            sel = groups == k
            out[sel] -= rows[sel].mean(axis=0)
        return out

    def batch_grad_step(idx):
        z = inputs_all[idx]
        kb = ks[idx]
        w = lambdas[kb] / len(idx)
        if config.exact_trace:
            # tile with unit tangents in every x direction
            rep = np.repeat(z, d_cols, axis=0)
            v = np.tile(np.eye(d_cols), (len(idx), 1))
            v = np.column_stack([v, np.zeros(len(rep))])
            y, dy, cache = nn.forward_tangent(net, rep, v)
            e = np.tile(np.eye(d_cols), (len(idx), 1))
            # objective: sum_j e_j . (J e_j) + |s|^2/2 (primal counted once)
            wr = np.repeat(w, d_cols)
            ybar = (wr / d_cols)[:, None] * y
            dybar = wr[:, None] * e
            pen_loss = 0.0
            if eta > 0:
                # group by (snapshot, tangent direction): each Jacobian
                # column is centered against its own per-snapshot mean
                cols = np.tile(np.arange(d_cols), len(idx))
                dev = centered_rows(dy, np.repeat(kb, d_cols) * d_cols + cols)
                dybar = dybar + (2.0 * eta / len(idx)) * dev
                pen_loss = eta * float(np.sum(dev * dev)) / len(idx)
            grads, _, _ = nn.backward_tangent(net, cache, ybar, dybar)
            tr = np.sum(e * dy, axis=1).reshape(len(idx), d_cols).sum(axis=1)
            s = y[::d_cols]
            loss = float(np.sum(w * (tr + 0.5 * np.sum(s * s, axis=1)))) + pen_loss
        else:
            loss = 0.0
            grads = net.zero_grads()
            for _ in range(config.n_slices):
                # one direction shared across the batch, so the centered
                # penalty still vanishes on per-snapshot linear score fields
                vx = np.tile(slice_rng.rademacher(d_cols), (len(idx), 1))
                v = np.column_stack([vx, np.zeros(len(idx))])
                y, dy, cache = nn.forward_tangent(net, z, v)
                scale = w / config.n_slices
                ybar = scale[:, None] * y  # d/ds of |s|^2/2 averaged over slices
                dybar = scale[:, None] * vx
                if eta > 0:
                    dev = centered_rows(dy, kb)
                    dybar = dybar + (2.0 * eta / (config.n_slices * len(idx))) * dev
                    loss += eta * float(np.sum(dev * dev)) / (config.n_slices * len(idx))
                g, _, _ = nn.backward_tangent(net, cache, ybar, dybar)
                for acc, gi in zip(grads, g):
                    acc += gi
                loss += float(np.sum(scale * (np.sum(vx * dy, axis=1) + 0.5 * np.sum(y * y, axis=1))))
        return loss, grads

    n_train = len(train_idx)
    bs = min(config.batch_size, n_train)
    for epoch in range(config.epochs):
        order = train_idx[batch_rng.permutation(n_train)]
        epoch_loss = 0.0
        for start in range(0, n_train, bs):
            idx = order[start : start + bs]
            loss, grads = batch_grad_step(idx)
            if not np.isfinite(loss):
                raise Diverged(f"score training loss non-finite at epoch {epoch}")
            nn.adam_step(adam, net.params(), grads)
            epoch_loss += loss * len(idx)
        epoch_loss /= n_train
        loss_history.append(epoch_loss)

        # per-snapshot lambda refresh from current score magnitudes,
        # normalized to mean 1: the lambdas balance snapshots against each
        # other but must not rescale the objective globally, or training
        # games the normalization by shrinking |s| everywhere
        if config.adaptive_lambda:
            new_lambdas = np.ones(dataset.n_snapshots)
            for k in range(dataset.n_snapshots):
                idx = train_idx[ks[train_idx] == k]
                s = nn.forward(net, inputs_all[idx])
                new_lambdas[k] = 1.0 / (float(np.mean(np.sum(s * s, axis=1))) + config.lambda_floor)
            lambdas = new_lambdas / new_lambdas.mean()
        lambda_history.append(lambdas.copy())

        # validation objective: exact trace, uniform weights so values are
        # comparable across epochs even while the lambdas adapt
        if len(val_idx):
            val = _objective_on_indices(score, inputs_all, ks, val_idx, np.ones(dataset.n_snapshots))
        else:
            val = epoch_loss
        if val < best_val - 1e-12:
            best_val = val
            best_params = net.params_flat()
            best_epoch = epoch
        elif epoch - best_epoch > config.patience:
            break

    net.set_params_flat(best_params)
    per_snapshot = []
    for k in range(dataset.n_snapshots):
        idx = np.where(ks == k)[0]
        per_snapshot.append(_objective_on_indices(score, inputs_all, ks, idx, np.ones(dataset.n_snapshots)))
    score.lambdas = lambdas
    score.report = {
        "best_epoch": best_epoch,
        "best_val": best_val,
        "epochs_run": len(loss_history),
        "loss_history": loss_history,
        "lambda_final": lambdas.tolist(),
        "per_snapshot_loss": per_snapshot,
        "config": asdict(config),
    }
    return score


def _objective_on_indices(score, inputs_all, ks, idx, lambdas):
    """Exact-trace objective over a sample subset, already-normalized inputs."""
    net = score.net
    d = score.dim
    z = inputs_all[idx]
    rep = np.repeat(z, d, axis=0)
    v = np.tile(np.eye(d), (len(idx), 1))
    v = np.column_stack([v, np.zeros(len(rep))])
    y, dy, _ = nn.forward_tangent(net, rep, v)
    e = np.tile(np.eye(d), (len(idx), 1))
    tr = np.sum(e * dy, axis=1).reshape(len(idx), d).sum(axis=1)
    s = y[::d]
    w = lambdas[ks[idx]] / len(idx)
    return float(np.sum(w * (tr + 0.5 * np.sum(s * s, axis=1))))
