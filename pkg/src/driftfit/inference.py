"""Force-field inference by fitting pushforward densities to snapshots.

The force network is trained so that, for every adjacent snapshot pair,
pushing the earlier samples through the approximate probability-flow ODE
lands on the later empirical measure in Sinkhorn divergence. Gradients run
through the Euler steps by the exact discrete adjoint; the score network
is frozen throughout.

Post-processing helpers extract interaction matrices (mean negative force
Jacobian), the equilibrium force D s~ + div D recoverable from stationary
data alone, and the stationary current velocity that separates equilibrium
from non-equilibrium steady states.
"""

import csv
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import nn
from .numkit import RngStream
from .ot_sinkhorn import PointCloud, PairedSinkhornLoss, SinkhornParams, default_epsilon
from .prob_flow import (
    AdditiveNoise,
    CleFlowField,
    DriftFlowField,
    ForceModel,
    RateModel,
    ZeroNoise,
    integrate,
    integrate_backward_adjoint,
)

SUBSAMPLE_STREAM_BASE = 9000
FORCE_INIT_STREAM = 9900


class ScoreMissing(ValueError):
    pass


class Diverged(RuntimeError):
    pass


class DegenerateTruth(ValueError):
    pass


@dataclass
class InferenceConfig:
    hidden: tuple = (10, 10)
    w0: float = 1.0
    epochs: int = 200
    lr: float = 3e-3
    lr_decay: float = 1.0  # multiplicative learning-rate decay per epoch
    h: float = 0.02  # Euler substep inside each snapshot interval
    max_points: int = 300  # per-snapshot subsample cap for the transport loss
    epsilon: Optional[float] = None  # None: scale-free default per target
    sinkhorn_max_iters: int = 200
    sinkhorn_tolerance: float = 1e-4  # loose: SGD only needs gradient direction
    n_blocks: int = 1  # independent subsample blocks cycled across epochs
    restart: bool = True  # push measured samples pair by pair; False: one rollout
    trajectory_loss: bool = False  # paired-endpoint MSE instead of Sinkhorn
    patience: int = 10 ** 9
    seed: int = 0


@dataclass
class InferenceProblem:
    dataset: object
    score: object  # TrainedScore/AnalyticScore, or None for the zero-D ablation
    noise: object  # noise model from prob_flow; None means ZeroNoise
    gamma: Optional[np.ndarray] = None  # positive per-pair weights, default 1
    volume: float = 20.0  # reaction volume, joint-CLE mode only
    config: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if self.noise is None:
            self.noise = ZeroNoise()
        k = self.dataset.n_snapshots
        if self.gamma is None:
            self.gamma = np.ones(max(k - 1, 0))
        else:
            self.gamma = np.asarray(self.gamma, dtype=float)
            if self.gamma.shape != (k - 1,) or np.any(self.gamma <= 0):
                raise ValueError("gamma needs one positive weight per snapshot pair")


@dataclass
class InferenceResult:
    force: object  # ForceModel, or RateModel in CLE mode
    field: object  # the flow field used during training
    loss_history: list  # total weighted loss per epoch
    pair_losses: list  # final per-pair losses, index k-1 for pair (k-1, k)
    fitted_snapshots: dict  # k -> pushforward cloud at t_k from final params
    mode: str  # "known-D" | "zero-D" | "joint-cle"
    config: dict


def _prepare_pairs(problem):
    """Snapshot-pair loss terms, as a list of blocks cycled across epochs.

    Each block holds one independent subsample draw per snapshot pair;
    cycling blocks makes training minimize the subsample-averaged loss
    instead of riding one draw's sampling noise to a biased optimum.
    Trajectory mode has a single block (the pairing is fixed).
    """
    ds = problem.dataset
    cfg = problem.config
    if ds.n_snapshots < 2:
        raise ValueError("need at least two snapshots to fit dynamics")
    if cfg.n_blocks < 1:
        raise ValueError("n_blocks must be at least 1")
    # trajectory mode keeps row pairing across every snapshot, so one shared
    # permutation picks the same particles throughout (a single rollout then
    # stays aligned with each target)
    if cfg.trajectory_loss:
        counts = {len(s) for s in ds.snapshots}
        if len(counts) != 1:
            raise ValueError("trajectory loss needs paired snapshots of equal size")
        stream = RngStream(cfg.seed, SUBSAMPLE_STREAM_BASE + 1)
        traj_idx = stream.permutation(counts.pop())[: cfg.max_points]
        pairs = []
        for k in range(1, ds.n_snapshots):
            src = ds.snapshots[k - 1][traj_idx]
            tgt = ds.snapshots[k][traj_idx]
            pairs.append(
                {"t0": ds.times[k - 1], "t1": ds.times[k], "src": src, "tgt": tgt, "loss": None}
            )
        return [pairs]
    blocks = [[] for _ in range(cfg.n_blocks)]
    for k in range(1, ds.n_snapshots):
        stream = RngStream(cfg.seed, SUBSAMPLE_STREAM_BASE + k)
        # two disjoint batches per side: the loss estimates every term
        # between independent clouds, so its sampling bias cancels
        # instead of rewarding over-contracted pushforwards
        n_src = len(ds.snapshots[k - 1])
        n_tgt = len(ds.snapshots[k])
        n = min(cfg.max_points, n_src // 2, n_tgt // 2)
        if n < 1:
            raise ValueError("snapshots need at least two points each")
        for block in blocks:
            isrc = stream.permutation(n_src)
            itgt = stream.permutation(n_tgt)
            src = ds.snapshots[k - 1][isrc[: 2 * n]]
            tgt_a = ds.snapshots[k][itgt[:n]]
            tgt_b = ds.snapshots[k][itgt[n : 2 * n]]
            tgt = ds.snapshots[k][itgt[: 2 * n]]
            eps = cfg.epsilon if cfg.epsilon is not None else default_epsilon(tgt_a)
            params = SinkhornParams(eps, cfg.sinkhorn_max_iters, cfg.sinkhorn_tolerance)
            loss = PairedSinkhornLoss(PointCloud(tgt_a), PointCloud(tgt_b), params)
            block.append(
                {"t0": ds.times[k - 1], "t1": ds.times[k], "src": src, "tgt": tgt, "loss": loss}
            )
    return blocks


def _pair_loss_grad(pair, xt):
    """(loss value, d loss / d pushforward particles)."""
    if pair["loss"] is None:
        diff = xt - pair["tgt"]
        return float(np.mean(np.sum(diff * diff, axis=1))), 2.0 * diff / len(xt)
    val, grad, _ = pair["loss"].value_and_grad(xt)
    return val, grad


def _train(field, blocks, gamma, cfg, params_owner):
    """Adam on the weighted pair losses; returns (loss_history, pair_losses).

    Cycles through the subsample blocks, one per epoch. Best-parameter
    tracking (and patience) only compares epochs evaluated on the first
    block, so the comparisons always use the same loss estimate.
    """
    adam = nn.AdamState.for_params(field.params(), lr=cfg.lr)
    history = []
    best = np.inf
    best_params = params_owner.params_flat()
    best_epoch = -1
    for epoch in range(cfg.epochs):
        pairs = blocks[epoch % len(blocks)]
        grads = field.zero_grads()
        total = 0.0
        if cfg.restart:
            for k, pair in enumerate(pairs):
                xt, trace = integrate(field, pair["src"], pair["t0"], pair["t1"], cfg.h)
                val, gbar = _pair_loss_grad(pair, xt)
                g, _ = integrate_backward_adjoint(trace, gamma[k] * gbar)
                for acc, gi in zip(grads, g):
                    acc += gi
                total += gamma[k] * val
        else:
            # one rollout from the first snapshot; adjoint runs back through
            # the whole chain, picking up each pair's loss gradient in turn
            x = pairs[0]["src"]
            traces, endpoints = [], []
            for pair in pairs:
                x, trace = integrate(field, x, pair["t0"], pair["t1"], cfg.h)
                traces.append(trace)
                endpoints.append(x)
            lam = np.zeros_like(x)
            for k in range(len(pairs) - 1, -1, -1):
                val, gbar = _pair_loss_grad(pairs[k], endpoints[k])
                total += gamma[k] * val
                lam = lam + gamma[k] * gbar
                g, lam = integrate_backward_adjoint(traces[k], lam)
                for acc, gi in zip(grads, g):
                    acc += gi
        if not np.isfinite(total):
            raise Diverged(f"inference loss non-finite at epoch {epoch}")
        history.append(total)
        if epoch % len(blocks) == 0:
            if total < best - 1e-15:
                best = total
                best_params = params_owner.params_flat()
                best_epoch = epoch
            elif epoch - best_epoch > cfg.patience:
                break
        adam.lr = cfg.lr * cfg.lr_decay**epoch
        nn.adam_step(adam, field.params(), grads)
    params_owner.set_params_flat(best_params)
    pair_losses = []
    for pair in blocks[0]:
        xt, _ = integrate(field, pair["src"], pair["t0"], pair["t1"], cfg.h)
        val, _ = _pair_loss_grad(pair, xt)
        pair_losses.append(val)
    return history, pair_losses


def _fitted_snapshots(field, pairs, cfg):
    out = {}
    for k, pair in enumerate(pairs, start=1):
        xt, _ = integrate(field, pair["src"], pair["t0"], pair["t1"], cfg.h)
        out[k] = xt
    return out


def fit_force(problem):
    """Learn the autonomous force on the approximate probability flow.

    The noise model fixes the mode: an actual D (known-D), or ZeroNoise for
    the TrajectoryNet-style ablation where the flow is the bare force ODE.
    """
    cfg = problem.config
    ds = problem.dataset
    zero_noise = isinstance(problem.noise, ZeroNoise)
    if problem.score is None and not zero_noise:
        raise ScoreMissing("known-D inference needs a trained score")
    pooled = ds.pooled()
    net = nn.MlpModel([ds.dim, *cfg.hidden, ds.dim], w0=cfg.w0, rng=RngStream(cfg.seed, FORCE_INIT_STREAM))
    net.weights[-1][:] = 0.0  # start from f = 0
    force = ForceModel(net, pooled.mean(axis=0), np.maximum(pooled.std(axis=0), 1e-6))
    field = DriftFlowField(force, problem.noise, problem.score)
    blocks = _prepare_pairs(problem)
    history, pair_losses = _train(field, blocks, problem.gamma, cfg, net)
    return InferenceResult(
        force=force,
        field=field,
        loss_history=history,
        pair_losses=pair_losses,
        fitted_snapshots=_fitted_snapshots(field, blocks[0], cfg),
        mode="zero-D" if zero_noise else "known-D",
        config=asdict(cfg),
    )


def fit_force_joint_cle(problem):
    """Jointly learn the 1D reaction rates u, v (drift u-v, diffusion (u+v)/2V)."""
    cfg = problem.config
    ds = problem.dataset
    if ds.dim != 1:
        raise ValueError("joint-CLE mode is for 1D concentration data")
    if problem.score is None:
        raise ScoreMissing("joint-CLE inference needs a trained score")
    pooled = ds.pooled()
    net = nn.MlpModel([1, *cfg.hidden, 2], w0=cfg.w0, rng=RngStream(cfg.seed, FORCE_INIT_STREAM))
    net.weights[-1][:] = 0.0
    rates = RateModel(net, float(pooled.mean()), max(float(pooled.std()), 1e-6))
    field = CleFlowField(rates, problem.volume, problem.score)
    blocks = _prepare_pairs(problem)
    history, pair_losses = _train(field, blocks, problem.gamma, cfg, net)
    return InferenceResult(
        force=rates,
        field=field,
        loss_history=history,
        pair_losses=pair_losses,
        fitted_snapshots=_fitted_snapshots(field, blocks[0], cfg),
        mode="joint-cle",
        config=asdict(cfg),
    )


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------


class EquilibriumForce:
    """f_eq(x) = D(x) s~(x) + div D(x): the force recoverable at equilibrium.

    Fit to stationary data this is the full story; out of equilibrium it
    misses the solenoidal current, which is exactly the degeneracy the
    snapshots-over-time approach lifts.
    """

    def __init__(self, score, noise, t=None):
        self.score = score
        self.noise = noise
        self.t = t if t is not None else getattr(score, "t_lo", 0.0)

    def eval(self, x):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        s = np.atleast_2d(self.score.value(xb, self.t))
        out = self.noise.apply(xb, s) + self.noise.divergence(xb)
        return out[0] if np.asarray(x).ndim == 1 else out

    def jacobian(self, x):
        """d f_eq / d x; supported for constant (additive) or zero D."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        sjac = self.score.x_jacobian(xb, self.t)
        if isinstance(self.noise, ZeroNoise):
            return np.zeros_like(sjac)
        if isinstance(self.noise, AdditiveNoise):
            return np.einsum("ij,njk->nik", self.noise.d_mat, sjac)
        raise NotImplementedError("equilibrium Jacobian for state-dependent D")


def equilibrium_force(score, noise, x, t=None):
    """Evaluate D s~ + div D at samples x (stationary score at time t)."""
    return EquilibriumForce(score, noise, t).eval(x)


def interaction_matrix(force, samples):
    """Omega~ = -(mean force Jacobian): a recovered linear OU gives Omega itself.

    samples may be a SnapshotDataset (pooled, unweighted over all samples)
    or a plain (N, d) array.
    """
    pts = samples.pooled() if hasattr(samples, "pooled") else np.atleast_2d(samples)
    jac = force.jacobian(pts)
    return -np.mean(jac, axis=0)


def stationary_current_velocity(force, score, noise, x, t=None):
    """j/p = f - div D - D s~: zero at equilibrium, rotational otherwise."""
    field = DriftFlowField(force, noise, score)
    t_eval = t if t is not None else getattr(score, "t_lo", 0.0)
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    out = field.velocity(xb, t_eval)
    return out[0] if np.asarray(x).ndim == 1 else out


def rmse(estimated, truth, samples):
    """Relative squared error sum |f~ - f|^2 / sum |f|^2 over the cloud.

    estimated/truth are callables or force-like objects with .eval.
    """
    pts = np.atleast_2d(np.asarray(samples, dtype=float))
    f_est = estimated.eval(pts) if hasattr(estimated, "eval") else estimated(pts)
    f_true = truth.eval(pts) if hasattr(truth, "eval") else truth(pts)
    denom = float(np.sum(f_true * f_true))
    if denom < 1e-12:
        raise DegenerateTruth("true field vanishes on the evaluation cloud")
    diff = f_est - f_true
    return float(np.sum(diff * diff)) / denom


# ---------------------------------------------------------------------------
# Results directory
# ---------------------------------------------------------------------------


def _write_cloud_csv(path, points):
    header = [f"x{j + 1}" for j in range(points.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in points:
            writer.writerow([f"{v:.17g}" for v in row])


def save_result(result, out_dir, report_extra=None):
    """force_model.json / rates_model.json, report.json, fitted_snapshot_<k>.csv."""
    os.makedirs(out_dir, exist_ok=True)
    if result.mode == "joint-cle":
        payload = {
            "net": nn.model_to_dict(result.force.net),
            "x_mean": result.force.x_mean,
            "x_std": result.force.x_std,
            "volume": result.field.volume,
        }
        with open(os.path.join(out_dir, "rates_model.json"), "w") as fh:
            json.dump(payload, fh)
    else:
        payload = {
            "net": nn.model_to_dict(result.force.net),
            "x_mean": result.force.x_mean.tolist(),
            "x_std": result.force.x_std.tolist(),
        }
        with open(os.path.join(out_dir, "force_model.json"), "w") as fh:
            json.dump(payload, fh)
    report = {
        "mode": result.mode,
        "loss_history": result.loss_history,
        "pair_losses": result.pair_losses,
        "config": result.config,
    }
    if report_extra:
        report.update(report_extra)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    for k, cloud in result.fitted_snapshots.items():
        _write_cloud_csv(os.path.join(out_dir, f"fitted_snapshot_{k}.csv"), cloud)


def load_force_model(path):
    with open(path) as fh:
        payload = json.load(fh)
    net = nn.model_from_dict(payload["net"])
    return ForceModel(net, np.asarray(payload["x_mean"]), np.asarray(payload["x_std"]))


def load_rate_model(path):
    with open(path) as fh:
        payload = json.load(fh)
    net = nn.model_from_dict(payload["net"])
    return RateModel(net, payload["x_mean"], payload["x_std"]), payload["volume"]
