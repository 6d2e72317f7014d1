"""Command-line experiment driver.

Commands (all write under --out, default the config's out_dir):

  simulate     generate the configured snapshot dataset -> <out>/dataset/
  train-score  fit the time-conditioned score          -> <out>/score*
  infer        fit the force field (or the equilibrium
               pipeline with --stationary)             -> <out>/results/
  eval         compare against the closed-form truth   -> <out>/eval/
  run-all      all four stages in order

Exit codes: 0 success, 2 invalid config / missing inputs / fingerprint
mismatch, 3 runtime failure (divergence, non-finite states). A lock file
in the output directory rejects concurrent writers.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .config import ConfigError, System, inference_config, load_config, resolve_config, score_config
from .inference import (
    EquilibriumForce,
    InferenceProblem,
    fit_force,
    fit_force_joint_cle,
    interaction_matrix,
    load_force_model,
    load_rate_model,
    rmse,
    save_result,
    stationary_current_velocity,
)
from .numkit import NonFinite, RngStream
from .prob_flow import AdditiveNoise, ZeroNoise
from .score_model import ScoreConfig, TrainedScore, train_score
from .score_model import Diverged as ScoreDiverged
from .inference import Diverged as InferDiverged
from .sde_sim import SnapshotDataset, load_dataset, save_dataset

EVAL_SUBSAMPLE_STREAM = 9950
EVAL_POINTS = 2000


class CliError(Exception):
    """User-facing failure with an explicit exit code."""

    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------


def _write_config_echo(cfg, out_dir):
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def _load_dataset(out_dir):
    path = os.path.join(out_dir, "dataset")
    if not os.path.isdir(path):
        raise CliError(f"dataset directory not found: {path} (run simulate first)", 2)
    return load_dataset(path)


def _holdout_slice(cfg, dataset):
    """First half of the snapshots when inference.holdout_last is set."""
    if not cfg["inference"]["holdout_last"]:
        return dataset
    n = (dataset.n_snapshots + 1) // 2
    if n < 2:
        raise CliError("inference.holdout_last: needs at least 4 snapshots", 2)
    return SnapshotDataset(
        dim=dataset.dim,
        times=dataset.times[:n],
        snapshots=dataset.snapshots[:n],
        metadata=dataset.metadata,
    )


def _score_paths(out_dir):
    return os.path.join(out_dir, "score.json"), os.path.join(out_dir, "score_meta.json")


def _load_score(out_dir, dataset):
    model_path, meta_path = _score_paths(out_dir)
    if not (os.path.exists(model_path) and os.path.exists(meta_path)):
        raise CliError(f"score checkpoint not found in {out_dir} (run train-score first)", 2)
    score = TrainedScore.load(model_path, meta_path)
    if score.dataset_fingerprint and score.dataset_fingerprint != dataset.fingerprint():
        raise CliError("score checkpoint was trained on a different dataset (fingerprint mismatch)", 2)
    if score.dim != dataset.dim:
        raise CliError("score checkpoint dimension does not match the dataset", 2)
    return score


def _eval_points(dataset, cap=EVAL_POINTS, seed=0):
    pooled = dataset.pooled()
    if len(pooled) <= cap:
        return pooled
    idx = RngStream(seed, EVAL_SUBSAMPLE_STREAM).permutation(len(pooled))[:cap]
    return pooled[np.sort(idx)]


def _write_csv(path, comment, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg, out_dir):
    dataset = cfgmod.run_simulate(cfg)
    save_dataset(dataset, os.path.join(out_dir, "dataset"))
    print(f"simulate: {dataset.n_snapshots} snapshots of {len(dataset.snapshots[0])} "
          f"samples in dim {dataset.dim} -> {out_dir}/dataset")


def cmd_train_score(cfg, out_dir):
    dataset = _holdout_slice(cfg, _load_dataset(out_dir))
    score = train_score(dataset, score_config(cfg))
    model_path, meta_path = _score_paths(out_dir)
    score.save(model_path, meta_path, dataset.fingerprint())
    with open(os.path.join(out_dir, "score_report.json"), "w") as fh:
        json.dump(score.report, fh, indent=2, sort_keys=True)
    print(f"train-score: best epoch {score.report.get('best_epoch')} "
          f"val {score.report.get('best_val'):.6g} -> {model_path}")


def _build_problem(cfg, dataset, score, system):
    mode = cfg["inference"]["noise_mode"]
    gamma = cfg["inference"]["gamma"]
    gamma = None if gamma is None else np.asarray(gamma, dtype=float)[: dataset.n_snapshots - 1]
    if mode == "zero":
        noise = ZeroNoise()
        score = None
    elif mode == "joint-cle":
        noise = None  # the CLE field carries its own diffusion
    else:
        if system.kind != "ou":
            raise CliError("inference.noise_mode: known-D mode needs the OU system's constant D", 2)
        noise = AdditiveNoise(system.d_mat)
    return InferenceProblem(dataset, score, noise, gamma=gamma,
                            volume=system.volume or 20.0, config=inference_config(cfg))


def cmd_infer(cfg, out_dir):
    dataset_full = _load_dataset(out_dir)
    dataset = _holdout_slice(cfg, dataset_full)
    system = System(cfg)
    results_dir = os.path.join(out_dir, "results")
    if cfg["inference"]["stationary"]:
        score = _load_score(out_dir, dataset)
        noise = AdditiveNoise(system.d_mat)
        t_mid = float(np.median(dataset.times))
        eq = EquilibriumForce(score, noise, t=t_mid)
        pts = _eval_points(dataset, seed=cfg["seed"])
        omega_eq = interaction_matrix(eq, pts)
        current = stationary_current_velocity(eq, score, noise, pts, t=t_mid)
        force_scale = float(np.sqrt(np.mean(np.sum(eq.eval(pts) ** 2, axis=1))))
        report = {
            "mode": "stationary-equilibrium",
            "omega_eq": omega_eq.tolist(),
            "current_rms": float(np.sqrt(np.mean(np.sum(current**2, axis=1)))),
            "force_rms": force_scale,
            "eval_time": t_mid,
            "config": cfg,
        }
        os.makedirs(results_dir, exist_ok=True)
        with open(os.path.join(results_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        print(f"infer (stationary): omega_eq written, current rms "
              f"{report['current_rms']:.3g} vs force rms {force_scale:.3g}")
        return
    mode = cfg["inference"]["noise_mode"]
    score = None if mode == "zero" else _load_score(out_dir, dataset)
    problem = _build_problem(cfg, dataset, score, system)
    if mode == "joint-cle":
        result = fit_force_joint_cle(problem)
    else:
        result = fit_force(problem)
    save_result(result, results_dir, report_extra={"config_echo": cfg})
    print(f"infer ({result.mode}): final loss {result.loss_history[-1]:.6g}, "
          f"best {min(result.loss_history):.6g} -> {results_dir}")


def _omega_metrics(omega_tilde, omega_true):
    diff = omega_tilde - omega_true
    asym = 0.5 * (omega_tilde - omega_tilde.T)
    asym_true = 0.5 * (omega_true - omega_true.T)
    return {
        "omega_tilde": omega_tilde.tolist(),
        "omega_true": omega_true.tolist(),
        "omega_rel_error": float(np.linalg.norm(diff) / np.linalg.norm(omega_true)),
        "omega_antisym_rel_error": float(
            np.linalg.norm(asym - asym_true) / np.linalg.norm(omega_true)
        ),
    }


def _eval_force_run(cfg, out_dir, system, dataset, report, eval_dir):
    model_path = os.path.join(out_dir, "results", "force_model.json")
    if not os.path.exists(model_path):
        raise CliError(f"force model not found: {model_path}", 2)
    force = load_force_model(model_path)
    pts = _eval_points(dataset, seed=cfg["seed"])
    truth = system.true_force

    metrics = {"mode": report["mode"], "rmse": rmse(force, truth, pts)}

    n_train = (dataset.n_snapshots + 1) // 2 if cfg["inference"]["holdout_last"] else dataset.n_snapshots
    rows = []
    for k in range(dataset.n_snapshots):
        snap = dataset.snapshots[k]
        rows.append((float(dataset.times[k]), rmse(force, truth, snap), int(k < n_train)))
    _write_csv(
        os.path.join(eval_dir, "rmse_vs_time.csv"),
        "relative squared field error sum|f_hat-f|^2/sum|f|^2 on each snapshot; "
        "in_horizon=1 marks snapshots the force was trained on",
        ["time", "rmse", "in_horizon"],
        rows,
    )
    metrics["rmse_vs_time"] = {f"{t:g}": r for t, r, _ in rows}
    metrics["training_horizon"] = float(dataset.times[n_train - 1])

    f_true = np.atleast_2d(truth(pts))
    f_inf = np.atleast_2d(force.eval(pts))
    d = dataset.dim
    _write_csv(
        os.path.join(eval_dir, "field_comparison.csv"),
        "pooled sample positions with true and inferred force components",
        [f"x{j+1}" for j in range(d)]
        + [f"f_true{j+1}" for j in range(d)]
        + [f"f_inferred{j+1}" for j in range(d)],
        [tuple(map(float, np.concatenate([pts[i], f_true[i], f_inf[i]]))) for i in range(len(pts))],
    )

    if system.kind == "ou":
        metrics.update(_omega_metrics(interaction_matrix(force, pts), system.omega))

    dt_snap = float(np.median(np.diff(dataset.times)))
    _write_csv(
        os.path.join(eval_dir, "rmse_vs_dt.csv"),
        "snapshot spacing and overall field error for this run; "
        "sweep rows are aggregated across runs",
        ["dt_snap", "seed", "rmse"],
        [(dt_snap, cfg["seed"], metrics["rmse"])],
    )
    return metrics


def _eval_cle_run(cfg, out_dir, system, dataset, report, eval_dir):
    model_path = os.path.join(out_dir, "results", "rates_model.json")
    if not os.path.exists(model_path):
        raise CliError(f"rates model not found: {model_path}", 2)
    rates, volume = load_rate_model(model_path)
    pooled = dataset.pooled()[:, 0]
    lo, hi = np.quantile(pooled, [0.05, 0.95])  # central 90% of visited concentrations
    grid = np.linspace(max(lo, 1e-6), hi, 200)

    from .sde_sim import schlogl_rates

    u_t, v_t = schlogl_rates(system.schlogl, grid)
    u_i, v_i, _, _ = rates.rates(grid)
    drift_t, drift_i = u_t - v_t, u_i - v_i
    diff_t = (u_t + v_t) / (2.0 * system.volume)
    diff_i = (u_i + v_i) / (2.0 * volume)
    _write_csv(
        os.path.join(eval_dir, "rates_comparison.csv"),
        "true vs inferred volumetric rates, drift u-v, and diffusion (u+v)/2V "
        "over the central 90% of visited concentrations",
        ["x", "u_true", "v_true", "u_inferred", "v_inferred",
         "drift_true", "drift_inferred", "diffusion_true", "diffusion_inferred"],
        [tuple(map(float, row)) for row in
         zip(grid, u_t, v_t, u_i, v_i, drift_t, drift_i, diff_t, diff_i)],
    )

    # largest drift zero crossing on the grid (the stable fixed point)
    crossing = None
    sign = np.sign(drift_i)
    for j in range(len(grid) - 1, 0, -1):
        if sign[j] != sign[j - 1] and sign[j - 1] > 0:
            x0, x1 = grid[j - 1], grid[j]
            y0, y1 = drift_i[j - 1], drift_i[j]
            crossing = float(x0 - y0 * (x1 - x0) / (y1 - y0))
            break
    metrics = {
        "mode": report["mode"],
        "zero_crossing": crossing,
        "zero_crossing_true": float(system.schlogl.fixed_point()),
        "diffusion_rel_error": float(
            np.sqrt(np.sum((diff_i - diff_t) ** 2) / np.sum(diff_t**2))
        ),
        "drift_rel_error": float(np.sqrt(np.sum((drift_i - drift_t) ** 2) / np.sum(drift_t**2))),
        "volume": volume,
    }
    return metrics


def _eval_stationary_run(cfg, system, report):
    omega_eq = np.asarray(report["omega_eq"])
    sigma = system.stationary_covariance()
    target = system.d_mat @ np.linalg.inv(sigma)  # symmetric-part oracle D Sigma^-1
    asym = 0.5 * (omega_eq - omega_eq.T)
    return {
        "mode": report["mode"],
        "omega_eq": omega_eq.tolist(),
        "omega_eq_target": target.tolist(),
        "omega_eq_rel_error": float(np.linalg.norm(omega_eq - target) / np.linalg.norm(target)),
        "omega_eq_antisym_fraction": float(np.linalg.norm(asym) / np.linalg.norm(omega_eq)),
        "current_rms": report["current_rms"],
        "force_rms": report["force_rms"],
        "current_over_force": report["current_rms"] / max(report["force_rms"], 1e-300),
    }


def cmd_eval(cfg, out_dir):
    report_path = os.path.join(out_dir, "results", "report.json")
    if not os.path.exists(report_path):
        raise CliError(f"inference report not found: {report_path} (run infer first)", 2)
    with open(report_path) as fh:
        report = json.load(fh)
    dataset = _load_dataset(out_dir)
    system = System(cfg)
    eval_dir = os.path.join(out_dir, "eval")
    os.makedirs(eval_dir, exist_ok=True)

    if report["mode"] == "stationary-equilibrium":
        metrics = _eval_stationary_run(cfg, system, report)
    elif report["mode"] == "joint-cle":
        metrics = _eval_cle_run(cfg, out_dir, system, dataset, report, eval_dir)
    else:
        metrics = _eval_force_run(cfg, out_dir, system, dataset, report, eval_dir)
    metrics["config"] = cfg
    with open(os.path.join(eval_dir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    headline = {k: v for k, v in metrics.items()
                if isinstance(v, (int, float)) and k != "config"}
    print("eval:", json.dumps(headline, sort_keys=True))


COMMANDS = {
    "simulate": [cmd_simulate],
    "train-score": [cmd_train_score],
    "infer": [cmd_infer],
    "eval": [cmd_eval],
    "run-all": [cmd_simulate, cmd_train_score, cmd_infer, cmd_eval],
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="driftfit",
        description="Infer autonomous force fields of latent diffusions from "
                    "population snapshots.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="experiment config JSON (may name a preset)")
    parser.add_argument("--preset", help="built-in preset: ou2, ou6, ou2-trap, schlogl")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--noise-mode", choices=["known", "joint-cle", "zero"],
                        help="inference noise model override")
    parser.add_argument("--stationary", action="store_true",
                        help="equilibrium pipeline: recover D s + div D instead of fitting")
    parser.add_argument("--holdout-last", action="store_true",
                        help="train on the first half of the snapshots only")
    return parser


def _resolve_from_args(args):
    raw = {}
    if args.config:
        if not os.path.exists(args.config):
            raise CliError(f"config file not found: {args.config}", 2)
        with open(args.config) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CliError(f"config file {args.config}: invalid JSON ({exc})", 2)
    if args.preset:
        raw.setdefault("preset", args.preset)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["out_dir"] = args.out
    inf = raw.setdefault("inference", {})
    if args.noise_mode:
        inf["noise_mode"] = args.noise_mode
    if args.stationary:
        inf["stationary"] = True
    if args.holdout_last:
        inf["holdout_last"] = True
    if not raw.get("preset") and "system" not in raw:
        raise CliError("no experiment given: pass --config and/or --preset", 2)
    return resolve_config(raw)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code

    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        print(f"error: {out_dir} is locked by another invocation ({lock_path})", file=sys.stderr)
        return 2
    try:
        os.write(lock_fd, str(os.getpid()).encode())
        os.close(lock_fd)
        _write_config_echo(cfg, out_dir)
        for step in COMMANDS[args.command]:
            step(cfg, out_dir)
        return 0
    except (ConfigError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ScoreDiverged, InferDiverged, NonFinite, FloatingPointError) as exc:
        print(f"error: runtime failure: {exc}", file=sys.stderr)
        return 3
    finally:
        if os.path.exists(lock_path):
            os.remove(lock_path)


if __name__ == "__main__":
    sys.exit(main())
