"""Diffusion process definitions, Euler-Maruyama integration, benchmarks.

A DiffusionSpec bundles the drift f(x), diffusion matrix D(x) (with
D = G G^T under the sqrt(2) G dW convention) and the row-wise divergence
of D. Drift/diffusion callables are batched: they map (N, d) arrays to
(N, d) / (N, d, d) arrays.

Benchmarks: a (possibly trapped) Ornstein-Uhlenbeck process with additive
noise, and the Schlogl chemical Langevin equation with multiplicative
noise. simulate_snapshots turns either into a SnapshotDataset of
cross-sectional samples.
"""

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numkit import DimensionMismatch, NonFinite, RngStream, cholesky

SHUFFLE_STREAM_BASE = 1 << 31
X0_STREAM = 1 << 30


class NegativeConcentration(ValueError):
    pass


@dataclass
class DiffusionSpec:
    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    diffusion_divergence: Callable[[np.ndarray], np.ndarray]
    noise_kind: str = "additive"  # "additive" | "multiplicative"
    constant_d: Optional[np.ndarray] = None  # set for additive noise

    def __post_init__(self):
        if self.noise_kind not in ("additive", "multiplicative"):
            raise ValueError(f"unknown noise_kind {self.noise_kind!r}")
        if self.noise_kind == "additive":
            if self.constant_d is None:
                raise ValueError("additive noise requires constant_d")
            self.constant_d = np.asarray(self.constant_d, dtype=float)
            self._chol = cholesky(self.constant_d)
        else:
            self._chol = None

    def check_divergence(self, probes, h=1e-5, tol=1e-4):
        """Compare diffusion_divergence against finite differences of D."""
        probes = np.atleast_2d(np.asarray(probes, dtype=float))
        claimed = self.diffusion_divergence(probes)
        fd = np.zeros_like(probes)
        for j in range(self.dim):
            dx = np.zeros(self.dim)
            dx[j] = h
            dplus = self.diffusion(probes + dx)
            dminus = self.diffusion(probes - dx)
            fd += (dplus[:, :, j] - dminus[:, :, j]) / (2.0 * h)
        err = np.max(np.abs(claimed - fd))
        if err > tol:
            raise ValueError(f"diffusion_divergence mismatch: {err:g} > {tol:g}")
        return err


@dataclass
class SnapshotDataset:
    """K empirical measures with timestamps; the sole input to inference."""

    dim: int
    times: np.ndarray  # (K,), strictly increasing
    snapshots: list  # K arrays of shape (N_k, dim)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        for snap in self.snapshots:
            if snap.shape[0] < 2:
                raise ValueError("every snapshot needs at least 2 samples")
            if snap.shape[1] != self.dim:
                raise DimensionMismatch("snapshot dim mismatch")
            if not np.all(np.isfinite(snap)):
                raise NonFinite("snapshot contains non-finite samples")

    @property
    def n_snapshots(self):
        return len(self.snapshots)

    def counts(self):
        return [int(s.shape[0]) for s in self.snapshots]

    def pooled(self):
        return np.concatenate(self.snapshots, axis=0)

    def fingerprint(self):
        import hashlib

        h = hashlib.sha256()
        h.update(json.dumps({"dim": self.dim, "times": self.times.tolist(), "counts": self.counts()}, sort_keys=True).encode())
        for snap in self.snapshots:
            h.update(np.ascontiguousarray(snap).tobytes())
        return h.hexdigest()[:16]


def save_dataset(dataset, out_dir):
    """Write meta.json plus one snapshot_<k>.csv per time point."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "dim": dataset.dim,
        "times": dataset.times.tolist(),
        "counts": dataset.counts(),
        "metadata": dataset.metadata,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    header = [f"x{j + 1}" for j in range(dataset.dim)]
    for k, snap in enumerate(dataset.snapshots):
        with open(os.path.join(out_dir, f"snapshot_{k}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in snap:
                writer.writerow([f"{v:.17g}" for v in row])


def load_dataset(in_dir):
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    snapshots = []
    for k in range(len(meta["times"])):
        snap = np.loadtxt(os.path.join(in_dir, f"snapshot_{k}.csv"), delimiter=",", skiprows=1, ndmin=2)
        snapshots.append(snap)
    return SnapshotDataset(dim=meta["dim"], times=np.asarray(meta["times"]), snapshots=snapshots, metadata=meta.get("metadata", {}))


# ---------------------------------------------------------------------------
# Benchmark systems
# ---------------------------------------------------------------------------


@dataclass
class OuSpec:
    """Linear interactions -Omega x plus an optional Gaussian bump at the origin."""

    omega: np.ndarray
    d_mat: np.ndarray
    trap_alpha: float = 0.0
    trap_sigma: float = 1.0

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.d_mat = np.asarray(self.d_mat, dtype=float)
        if self.omega.shape != self.d_mat.shape or self.omega.shape[0] != self.omega.shape[1]:
            raise DimensionMismatch("omega and d_mat must be square and matching")
        if self.trap_sigma <= 0:
            raise ValueError("trap_sigma must be positive")

    @property
    def dim(self):
        return self.omega.shape[0]

    def to_diffusion_spec(self):
        return DiffusionSpec(
            dim=self.dim,
            drift=lambda x: ou_drift(self, x),
            diffusion=lambda x: np.broadcast_to(self.d_mat, (len(np.atleast_2d(x)), self.dim, self.dim)),
            diffusion_divergence=lambda x: np.zeros_like(np.atleast_2d(x)),
            noise_kind="additive",
            constant_d=self.d_mat,
        )


def ou_drift(spec, x):
    """-Omega x + alpha exp(-|x|^2 / 2 sigma^2) x."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != spec.dim:
        raise DimensionMismatch(f"expected dim {spec.dim}, got {xb.shape[1]}")
    out = -(xb @ spec.omega.T)
    if spec.trap_alpha != 0.0:
        bump = spec.trap_alpha * np.exp(-np.sum(xb * xb, axis=1) / (2.0 * spec.trap_sigma**2))
        out = out + bump[:, None] * xb
    return out[0] if single else out


def ou_drift_jacobian(spec, x):
    """Exact Jacobian of ou_drift; used by oracles and RMSE baselines."""
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    n = xb.shape[0]
    jac = np.broadcast_to(-spec.omega, (n, spec.dim, spec.dim)).copy()
    if spec.trap_alpha != 0.0:
        s2 = spec.trap_sigma**2
        bump = spec.trap_alpha * np.exp(-np.sum(xb * xb, axis=1) / (2.0 * s2))
        jac += bump[:, None, None] * np.eye(spec.dim)[None]
        jac -= (bump / s2)[:, None, None] * xb[:, :, None] * xb[:, None, :]
    return jac if np.asarray(x).ndim > 1 else jac[0]


@dataclass
class SchloglSpec:
    """Chemical Langevin equation for the Schlogl reaction network (1D)."""

    k1: float = 0.3
    k2: float = 0.02
    k3: float = 1.2
    k4: float = 1.0
    a: float = 1.0
    b: float = 1.0
    volume: float = 20.0

    def __post_init__(self):
        if self.volume <= 0:
            raise ValueError("volume must be positive")

    dim = 1

    def rate_derivatives(self, x):
        x = np.asarray(x, dtype=float)
        du = 2.0 * self.k1 * self.a * x
        dv = 3.0 * self.k2 * x * x + self.k4
        return du, dv

    def to_diffusion_spec(self):
        def drift(xb):
            u, v = schlogl_rates(self, np.atleast_2d(xb)[:, 0])
            return (u - v)[:, None]

        def diffusion(xb):
            u, v = schlogl_rates(self, np.atleast_2d(xb)[:, 0])
            return ((u + v) / (2.0 * self.volume))[:, None, None]

        def divergence(xb):
            du, dv = self.rate_derivatives(np.atleast_2d(xb)[:, 0])
            return ((du + dv) / (2.0 * self.volume))[:, None]

        return DiffusionSpec(
            dim=1,
            drift=drift,
            diffusion=diffusion,
            diffusion_divergence=divergence,
            noise_kind="multiplicative",
        )

    def fixed_point(self, lo=1e-6, hi=100.0, iters=200):
        """Unique positive root of u(x) - v(x) for the default-style rates.

        Bisection on the cubic; assumes a sign change in [lo, hi].
        """

        def g(x):
            u, v = schlogl_rates(self, np.asarray([x]))
            return float(u[0] - v[0])

        # bracket the largest root by scanning down from hi
        xs = np.linspace(hi, lo, 2048)
        prev = g(xs[0])
        for x in xs[1:]:
            cur = g(x)
            if prev == 0.0:
                return float(xs[0])
            if prev * cur < 0:
                lo, hi = x, x + (xs[0] - xs[1])
                break
            prev = cur
        else:
            raise ValueError("no sign change found for drift root")
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if g(lo) * g(mid) <= 0:
                hi = mid
            else:
                lo = mid
        return 0.5 * (lo + hi)


def schlogl_rates(spec, x):
    """Volumetric growth and decay rates (u, v) of the Schlogl CLE."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise NegativeConcentration("concentration must be nonnegative")
    u = spec.k1 * spec.a * x * x + spec.k3 * spec.b
    v = spec.k2 * x**3 + spec.k4 * x
    return u, v


# ---------------------------------------------------------------------------
# Euler-Maruyama integration
# ---------------------------------------------------------------------------


def _diffusion_factor_batch(spec, xb):
    """Per-sample lower factors G with D = G G^T, shape (N, d, d)."""
    if spec.noise_kind == "additive":
        return None  # handled via the cached factor
    d_vals = spec.diffusion(xb)
    if not np.all(np.isfinite(d_vals)):
        raise NonFinite("diffusion evaluated to non-finite values")
    if spec.dim == 1:
        vals = d_vals.reshape(len(xb), 1, 1)
        if np.any(vals < -1e-8):
            from .numkit import NotPSD

            raise NotPSD("negative 1D diffusion coefficient")
        return np.sqrt(np.clip(vals, 0.0, None))
    return np.stack([cholesky(d_vals[i]) for i in range(len(xb))])


def _em_step_batch(spec, xb, dt, xi):
    f = spec.drift(xb)
    if not np.all(np.isfinite(f)):
        raise NonFinite("drift evaluated to non-finite values")
    scale = np.sqrt(2.0 * dt)
    if spec.noise_kind == "additive":
        noise = xi @ spec._chol.T
    else:
        g = _diffusion_factor_batch(spec, xb)
        noise = np.einsum("nij,nj->ni", g, xi)
    return xb + dt * f + scale * noise


def euler_maruyama_step(spec, x, dt, rng):
    """One Euler-Maruyama step: x + dt f(x) + sqrt(2 dt) G(x) xi."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFinite("state is non-finite")
    xi = rng.standard_normal(spec.dim)
    return _em_step_batch(spec, x[None, :], dt, xi[None, :])[0]


def simulate_snapshots(
    spec,
    x0_sampler,
    n_paths,
    dt,
    record_times,
    seed=0,
    stream_base=0,
    shuffle=True,
    reflect_nonnegative=False,
    metadata=None,
):
    """Run n_paths Euler-Maruyama trajectories and record cross-sections.

    x0_sampler(rng, n) must return an (n, dim) array. Each path owns the
    stream (seed, stream_base + 1 + path index), so results do not depend
    on execution order. Snapshot rows are shuffled by default so no
    trajectory linkage survives in the output.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    record_times = np.asarray(record_times, dtype=float)
    if record_times.ndim != 1 or len(record_times) < 1 or np.any(np.diff(record_times) <= 0):
        raise ValueError("record_times must be increasing and non-empty")
    steps = record_times / dt
    step_idx = np.rint(steps).astype(int)
    if np.max(np.abs(steps - step_idx)) > 1e-9:
        raise ValueError("record_times must be multiples of dt")
    n_steps = int(step_idx[-1])
    record_at = {int(s): k for k, s in enumerate(step_idx)}

    x0_rng = RngStream(seed, stream_base + X0_STREAM)
    x = np.asarray(x0_sampler(x0_rng, n_paths), dtype=float)
    if x.shape != (n_paths, spec.dim):
        raise DimensionMismatch("x0_sampler returned wrong shape")
    if reflect_nonnegative:
        x = np.abs(x)

    # per-path noise blocks keep the draws independent of the time loop
    xi = np.empty((n_paths, n_steps, spec.dim))
    for i in range(n_paths):
        xi[i] = RngStream(seed, stream_base + 1 + i).standard_normal((n_steps, spec.dim))

    snapshots = [None] * len(record_times)
    if 0 in record_at:
        snapshots[record_at[0]] = x.copy()
    for m in range(n_steps):
        try:
            x = _em_step_batch(spec, x, dt, xi[:, m, :])
        except NonFinite as exc:
            raise NonFinite(f"non-finite state at step {m} (t={m * dt:g}): {exc}") from exc
        if reflect_nonnegative:
            x = np.abs(x)
        if (m + 1) in record_at:
            snapshots[record_at[m + 1]] = x.copy()

    if shuffle:
        for k in range(len(snapshots)):
            perm = RngStream(seed, stream_base + SHUFFLE_STREAM_BASE + k).permutation(n_paths)
            snapshots[k] = snapshots[k][perm]

    meta = {"seed": seed, "dt": dt, "n_paths": n_paths, "noise_kind": spec.noise_kind}
    if metadata:
        meta.update(metadata)
    return SnapshotDataset(dim=spec.dim, times=record_times, snapshots=snapshots, metadata=meta)


def random_stable_system(dim, rng, real_part_range=(0.5, 2.5), coupling=0.8, d_scale=1.0):
    """Random non-normal stable interaction matrix and anisotropic SPD diffusion.

    Omega = Q^T T Q with T upper triangular, so its eigenvalues are the
    (positive) diagonal entries; the strict upper triangle makes it
    non-normal and non-reciprocal.
    """
    diag = rng.uniform(real_part_range[0], real_part_range[1], dim)
    tri = np.triu(rng.standard_normal((dim, dim)) * coupling, k=1)
    t = np.diag(diag) + tri
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    omega = q.T @ t @ q
    b = rng.standard_normal((dim, dim))
    d_mat = d_scale * (b @ b.T / dim + 0.3 * np.eye(dim))
    return omega, d_mat


def gaussian_x0_sampler(mean, cov_chol):
    """x0 law N(mean, L L^T) as a sampler closure."""
    mean = np.asarray(mean, dtype=float)
    cov_chol = np.asarray(cov_chol, dtype=float)

    def sample(rng, n):
        return mean + rng.standard_normal((n, len(mean))) @ cov_chol.T

    return sample


def point_x0_sampler(point):
    point = np.asarray(point, dtype=float)

    def sample(rng, n):
        return np.tile(point, (n, 1))

    return sample
