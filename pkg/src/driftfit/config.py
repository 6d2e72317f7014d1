"""Declarative experiment configuration for the command-line driver.

An experiment is a JSON document with five blocks. Every field has a
default; a user file only states what it overrides. The resolved config
(defaults filled in, preset applied, matrices materialized) is what gets
echoed into the results directory, and it round-trips losslessly through
JSON.

Schema (defaults in parentheses):

  {
    "preset": null,            # "ou2" | "ou6" | "ou2-trap" | "schlogl"; applied first
    "name": "custom",
    "seed": 0,                 # master seed; every stage derives keyed streams from it
    "out_dir": "results",
    "system": {
      "kind": "ou",            # "ou" | "schlogl"
      # kind == "ou":
      "omega": null,           # (d, d) interaction matrix; null -> random stable (ou6 preset)
      "d_mat": null,           # (d, d) SPD diffusion matrix
      "trap_alpha": 0.0,       # Gaussian bump strength at the origin
      "trap_sigma": 1.0,       # bump width
      # kind == "schlogl":
      "k": [0.3, 0.02, 1.2, 1.0],
      "a": 1.0, "b": 1.0,
      "volume": 20.0
    },
    "simulation": {
      "n_paths": 1000,
      "dt": 0.01,              # Euler-Maruyama step
      "record_times": [...],   # strictly increasing, multiples of dt
      "x0": {"kind": "gaussian", "mean": [...], "cov_diag": [...]}
            | {"kind": "point", "point": [...]}
            | {"kind": "stationary"}          # OU only: N(0, Sigma) by Lyapunov
    },
    "score": {                 # mirrors score_model.ScoreConfig (seed comes from master)
      "hidden": [20, 20, 20], "w0": 1.0, "epochs": 300, "lr": 0.003,
      "batch_size": 4096, "n_slices": 1, "exact_trace": true,
      "val_fraction": 0.1, "patience": 300, "lambda_floor": 0.01,
      "adaptive_lambda": true, "smoothness_penalty": 1.0
    },
    "inference": {             # mirrors inference.InferenceConfig plus mode switches
      "noise_mode": "known",   # "known" | "joint-cle" | "zero"
      "stationary": false,     # equilibrium pipeline instead of force fitting
      "holdout_last": false,   # train on the first half of the snapshots only
      "gamma": null,           # per-pair weights, null -> all 1
      "hidden": [10, 10], "w0": 1.0, "epochs": 200, "lr": 0.003,
      "h": 0.02, "max_points": 300, "epsilon": null,
      "sinkhorn_max_iters": 200, "sinkhorn_tolerance": 1e-4,
      "restart": true, "trajectory_loss": false
    }
  }
"""

import copy
import json

import numpy as np

from .inference import InferenceConfig
from .numkit import RngStream, cholesky, solve_lyapunov
from .score_model import ScoreConfig
from .sde_sim import (
    OuSpec,
    SchloglSpec,
    gaussian_x0_sampler,
    ou_drift,
    ou_drift_jacobian,
    point_x0_sampler,
    random_stable_system,
    schlogl_rates,
    simulate_snapshots,
)

SYSTEM_GEN_STREAM = 8000  # keyed stream for generated benchmark matrices


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field."""


_OU_SYSTEM = {
    "kind": "ou",
    "omega": None,
    "d_mat": None,
    "trap_alpha": 0.0,
    "trap_sigma": 1.0,
}
_SCHLOGL_SYSTEM = {
    "kind": "schlogl",
    "k": [0.3, 0.02, 1.2, 1.0],
    "a": 1.0,
    "b": 1.0,
    "volume": 20.0,
}
_SIMULATION = {
    "n_paths": 1000,
    "dt": 0.01,
    "record_times": None,
    "x0": None,
}
_SCORE = {
    "hidden": [20, 20, 20],
    "w0": 1.0,
    "epochs": 300,
    "lr": 3e-3,
    "batch_size": 4096,
    "n_slices": 1,
    "exact_trace": True,
    "val_fraction": 0.1,
    "patience": 300,
    "lambda_floor": 0.01,
    "adaptive_lambda": True,
    "smoothness_penalty": 1.0,
}
_INFERENCE = {
    "noise_mode": "known",
    "stationary": False,
    "holdout_last": False,
    "gamma": None,
    "hidden": [10, 10],
    "w0": 1.0,
    "epochs": 200,
    "lr": 3e-3,
    "lr_decay": 1.0,
    "h": 0.02,
    "max_points": 300,
    "epsilon": None,
    "sinkhorn_max_iters": 200,
    "sinkhorn_tolerance": 1e-4,
    "restart": True,
    "trajectory_loss": False,
}


def _times(dt_snap, k, start=0.0):
    return [round(start + (i + 1) * dt_snap, 10) for i in range(k)]


def preset(name):
    """Raw config dict for a named benchmark; resolve_config fills defaults."""
    if name == "ou2":
        return {
            "name": "ou2",
            "system": {
                "kind": "ou",
                "omega": [[2.0, 2.0], [-2.0, 2.0]],
                "d_mat": [[1.0, 0.0], [0.0, 1.0]],
            },
            "simulation": {
                "n_paths": 1000,
                "dt": 0.01,
                "record_times": [round(0.1 * i, 10) for i in range(20)],
                "x0": {"kind": "gaussian", "mean": [0.0, 0.0], "cov_diag": [4.0, 1.0]},
            },
            "inference": {"epochs": 400, "lr": 1e-2, "lr_decay": 0.995},
        }
    if name == "ou6":
        return {
            "name": "ou6",
            "system": {"kind": "ou", "omega": None, "d_mat": None},
            "simulation": {
                "n_paths": 5000,
                "dt": 0.01,
                "record_times": [round(0.1 * i, 10) for i in range(20)],
                "x0": {
                    "kind": "gaussian",
                    "mean": [0.0] * 6,
                    "cov_diag": [4.0, 1.0, 4.0, 1.0, 4.0, 1.0],
                },
            },
            "score": {"exact_trace": False},
            "inference": {"epochs": 400, "lr": 1e-2, "lr_decay": 0.995},
        }
    if name == "ou2-trap":
        return {
            "name": "ou2-trap",
            "system": {
                "kind": "ou",
                "omega": [[1.0, 0.0], [0.0, 1.0]],
                "d_mat": [[1.0, 0.0], [0.0, 1.0]],
                "trap_alpha": 10.0,
                "trap_sigma": 2.0,
            },
            "simulation": {
                "n_paths": 1000,
                "dt": 0.001,
                "record_times": _times(0.1, 20),
                "x0": {"kind": "gaussian", "mean": [0.0, 0.0], "cov_diag": [4.0, 1.0]},
            },
            "score": {"hidden": [10, 10, 10, 10]},
            "inference": {"epochs": 300, "lr": 1e-2},
        }
    if name == "schlogl":
        return {
            "name": "schlogl",
            "system": {"kind": "schlogl"},
            "simulation": {
                "n_paths": 1000,
                "dt": 0.01,
                "record_times": _times(0.2, 20),
                "x0": {"kind": "point", "point": [1.0]},
            },
            "score": {"hidden": [10, 10]},
            "inference": {"noise_mode": "joint-cle", "hidden": [10, 10, 10], "epochs": 300, "lr": 1e-2},
        }
    raise ConfigError(f"unknown preset {name!r}")


def _merge(base, override, path):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config field {path}{key}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _require(cond, field, why):
    if not cond:
        raise ConfigError(f"config field {field}: {why}")


def resolve_config(raw):
    """Apply preset and defaults, validate, and materialize generated matrices.

    Returns a plain JSON-serializable dict: the fully resolved config that
    gets echoed into every results directory.
    """
    raw = copy.deepcopy(raw) if raw else {}
    if not isinstance(raw, dict):
        raise ConfigError("config root: must be a JSON object")
    base = {}
    preset_name = raw.pop("preset", None)
    if preset_name is not None:
        base = preset(preset_name)
    kind = raw.get("system", {}).get("kind", base.get("system", {}).get("kind", "ou"))
    _require(kind in ("ou", "schlogl"), "system.kind", f"unknown kind {kind!r}")
    defaults = {
        "name": "custom",
        "seed": 0,
        "out_dir": "results",
        "system": _OU_SYSTEM if kind == "ou" else _SCHLOGL_SYSTEM,
        "simulation": _SIMULATION,
        "score": _SCORE,
        "inference": _INFERENCE,
    }
    cfg = _merge(defaults, base, "")
    cfg = _merge(cfg, raw, "")
    if preset_name is not None:
        cfg["preset"] = preset_name

    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "must be a nonnegative integer")

    sys_blk = cfg["system"]
    if kind == "ou":
        if sys_blk["omega"] is None or sys_blk["d_mat"] is None:
            # generated benchmark matrices, keyed by the master seed and
            # recorded in the echoed config for reproducibility
            dim = 6
            omega, d_mat = random_stable_system(dim, RngStream(cfg["seed"], SYSTEM_GEN_STREAM))
            sys_blk["omega"] = np.round(omega, 12).tolist()
            sys_blk["d_mat"] = np.round(d_mat, 12).tolist()
        omega = np.asarray(sys_blk["omega"], dtype=float)
        d_mat = np.asarray(sys_blk["d_mat"], dtype=float)
        _require(omega.ndim == 2 and omega.shape[0] == omega.shape[1], "system.omega", "must be square")
        _require(d_mat.shape == omega.shape, "system.d_mat", "must match omega's shape")
        _require(np.allclose(d_mat, d_mat.T), "system.d_mat", "must be symmetric")
        _require(sys_blk["trap_sigma"] > 0, "system.trap_sigma", "must be positive")
        dim = omega.shape[0]
    else:
        ks = sys_blk["k"]
        _require(len(ks) == 4 and all(v > 0 for v in ks), "system.k", "needs four positive rates")
        _require(sys_blk["volume"] > 0, "system.volume", "must be positive")
        _require(sys_blk["a"] > 0 and sys_blk["b"] > 0, "system.a/b", "must be positive")
        dim = 1

    sim = cfg["simulation"]
    _require(isinstance(sim["n_paths"], int) and sim["n_paths"] >= 2, "simulation.n_paths", "must be >= 2")
    _require(sim["dt"] is not None and sim["dt"] > 0, "simulation.dt", "must be positive")
    _require(sim["record_times"] is not None, "simulation.record_times", "is required")
    times = np.asarray(sim["record_times"], dtype=float)
    _require(times.ndim == 1 and len(times) >= 1, "simulation.record_times", "must be a nonempty list")
    _require(np.all(np.diff(times) > 0) and times[0] >= 0, "simulation.record_times", "must be increasing and nonnegative")
    steps = times / sim["dt"]
    _require(np.max(np.abs(steps - np.rint(steps))) < 1e-9, "simulation.record_times", "must be multiples of dt")

    x0 = sim["x0"]
    _require(isinstance(x0, dict) and "kind" in x0, "simulation.x0", "needs a kind")
    if x0["kind"] == "gaussian":
        _require(len(x0.get("mean", [])) == dim, "simulation.x0.mean", f"needs {dim} entries")
        _require(
            len(x0.get("cov_diag", [])) == dim and all(v > 0 for v in x0["cov_diag"]),
            "simulation.x0.cov_diag",
            f"needs {dim} positive entries",
        )
    elif x0["kind"] == "point":
        _require(len(x0.get("point", [])) == dim, "simulation.x0.point", f"needs {dim} entries")
    elif x0["kind"] == "stationary":
        _require(kind == "ou" and sys_blk["trap_alpha"] == 0.0, "simulation.x0", "stationary law needs a linear OU system")
    else:
        raise ConfigError(f"config field simulation.x0.kind: unknown kind {x0['kind']!r}")

    sc = cfg["score"]
    _require(len(sc["hidden"]) >= 1 and all(int(h) > 0 for h in sc["hidden"]), "score.hidden", "needs positive widths")
    _require(sc["epochs"] >= 1 and sc["lr"] > 0, "score.epochs/lr", "must be positive")

    inf = cfg["inference"]
    _require(
        inf["noise_mode"] in ("known", "joint-cle", "zero"),
        "inference.noise_mode",
        "must be one of known, joint-cle, zero",
    )
    _require(inf["epochs"] >= 1 and inf["lr"] > 0, "inference.epochs/lr", "must be positive")
    _require(inf["h"] > 0, "inference.h", "must be positive")
    _require(inf["max_points"] >= 2, "inference.max_points", "must be >= 2")
    if inf["gamma"] is not None:
        _require(
            len(inf["gamma"]) == len(times) - 1 and all(g > 0 for g in inf["gamma"]),
            "inference.gamma",
            "needs one positive weight per snapshot pair",
        )
    if inf["noise_mode"] == "joint-cle":
        _require(kind == "schlogl", "inference.noise_mode", "joint-cle applies to the 1D reaction system")

    # lossless round-trip guard: everything must be JSON-native by now
    cfg = json.loads(json.dumps(cfg))
    return cfg


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
    return resolve_config(raw)


# ---------------------------------------------------------------------------
# Builders: resolved config -> library objects
# ---------------------------------------------------------------------------


class System:
    """Benchmark system with its simulator spec and closed-form ground truth."""

    def __init__(self, cfg):
        blk = cfg["system"]
        self.kind = blk["kind"]
        if self.kind == "ou":
            self.ou = OuSpec(
                np.asarray(blk["omega"], dtype=float),
                np.asarray(blk["d_mat"], dtype=float),
                trap_alpha=blk["trap_alpha"],
                trap_sigma=blk["trap_sigma"],
            )
            self.spec = self.ou.to_diffusion_spec()
            self.omega = self.ou.omega
            self.d_mat = self.ou.d_mat
            self.volume = None
            self.reflect = False
        else:
            k = blk["k"]
            self.schlogl = SchloglSpec(k[0], k[1], k[2], k[3], blk["a"], blk["b"], blk["volume"])
            self.spec = self.schlogl.to_diffusion_spec()
            self.omega = None
            self.d_mat = None
            self.volume = blk["volume"]
            self.reflect = True

    @property
    def dim(self):
        return self.spec.dim

    def true_force(self, x):
        if self.kind == "ou":
            return ou_drift(self.ou, x)
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        u, v = schlogl_rates(self.schlogl, xb[:, 0])
        out = (u - v)[:, None]
        return out[0] if np.asarray(x).ndim == 1 else out

    def true_force_jacobian(self, x):
        if self.kind == "ou":
            return ou_drift_jacobian(self.ou, x)
        raise NotImplementedError("no closed-form Jacobian for the reaction system")

    def stationary_covariance(self):
        if self.kind != "ou" or self.ou.trap_alpha != 0.0:
            raise ConfigError("config field simulation.x0: stationary law needs a linear OU system")
        return solve_lyapunov(self.omega, self.d_mat)


def build_x0_sampler(cfg, system):
    x0 = cfg["simulation"]["x0"]
    if x0["kind"] == "gaussian":
        chol = np.diag(np.sqrt(np.asarray(x0["cov_diag"], dtype=float)))
        return gaussian_x0_sampler(np.asarray(x0["mean"], dtype=float), chol)
    if x0["kind"] == "point":
        return point_x0_sampler(np.asarray(x0["point"], dtype=float))
    sigma = system.stationary_covariance()
    return gaussian_x0_sampler(np.zeros(system.dim), cholesky(sigma))


def run_simulate(cfg):
    """Simulate the configured system; returns the SnapshotDataset."""
    system = System(cfg)
    sim = cfg["simulation"]
    return simulate_snapshots(
        system.spec,
        build_x0_sampler(cfg, system),
        n_paths=sim["n_paths"],
        dt=sim["dt"],
        record_times=np.asarray(sim["record_times"], dtype=float),
        seed=cfg["seed"],
        reflect_nonnegative=system.reflect,
        metadata={"experiment": cfg["name"], "system": cfg["system"]},
    )


def score_config(cfg):
    sc = cfg["score"]
    return ScoreConfig(
        hidden=tuple(sc["hidden"]),
        w0=sc["w0"],
        epochs=sc["epochs"],
        lr=sc["lr"],
        batch_size=sc["batch_size"],
        n_slices=sc["n_slices"],
        exact_trace=sc["exact_trace"],
        val_fraction=sc["val_fraction"],
        patience=sc["patience"],
        lambda_floor=sc["lambda_floor"],
        adaptive_lambda=sc["adaptive_lambda"],
        smoothness_penalty=sc["smoothness_penalty"],
        seed=cfg["seed"],
    )


def inference_config(cfg):
    inf = cfg["inference"]
    return InferenceConfig(
        hidden=tuple(inf["hidden"]),
        w0=inf["w0"],
        epochs=inf["epochs"],
        lr=inf["lr"],
        lr_decay=inf["lr_decay"],
        h=inf["h"],
        max_points=inf["max_points"],
        epsilon=inf["epsilon"],
        sinkhorn_max_iters=inf["sinkhorn_max_iters"],
        sinkhorn_tolerance=inf["sinkhorn_tolerance"],
        restart=inf["restart"],
        trajectory_loss=inf["trajectory_loss"],
        seed=cfg["seed"],
    )
