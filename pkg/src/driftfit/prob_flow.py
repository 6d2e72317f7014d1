"""Approximate probability-flow ODE: forward Euler and its exact adjoint.

The flow velocity is f(x) - div D(x) - D(x) s~(x, t). Integration stores
every substep state so the reverse pass can differentiate the discrete
Euler map exactly (discretize-then-optimize); the score is frozen, so
gradients flow only into the force (or rate) parameters.

Two concrete fields:

* DriftFlowField -- generic force + noise model + score. Supports the
  additive-noise and zero-noise adjoints used by the OU benchmarks.
* CleFlowField -- the 1D chemical-Langevin flow where a two-output rate
  network provides u, v and the diffusion (u + v) / 2V; its velocity needs
  the rates' input derivatives, so the adjoint runs through the network's
  tangent pass.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .numkit import DimensionMismatch, NonFinite
from .score_model import TrainedScore


class TraceMismatch(ValueError):
    pass


class SupportEscapeWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# Force wrappers
# ---------------------------------------------------------------------------


class ForceModel:
    """Autonomous force field f_theta(x) backed by an MLP, inputs standardized."""

    def __init__(self, net, x_mean=None, x_std=None):
        self.net = net
        d = net.d_in
        self.x_mean = np.zeros(d) if x_mean is None else np.asarray(x_mean, dtype=float)
        self.x_std = np.ones(d) if x_std is None else np.asarray(x_std, dtype=float)

    @property
    def dim(self):
        return self.net.d_out

    def _norm(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.x_mean) / self.x_std

    def eval(self, x):
        single = np.asarray(x).ndim == 1
        out = nn.forward(self.net, self._norm(x))
        return out[0] if single else out

    def eval_vjp(self, x, cotangent):
        """Returns (value, param grads, d loss/d x) for cotangent on the output."""
        z = self._norm(x)
        y, cache = nn.forward_cache(self.net, z)
        wb = np.atleast_2d(np.asarray(cotangent, dtype=float))
        grads, zbar = nn.backward(self.net, cache, wb)
        return y, grads, zbar / self.x_std[None, :]

    def jacobian(self, x):
        single = np.asarray(x).ndim == 1
        jac = nn.input_jacobian(self.net, self._norm(x)) / self.x_std[None, None, :]
        return jac[0] if single else jac

    def params(self):
        return self.net.params()

    def zero_grads(self):
        return self.net.zero_grads()


class AnalyticForce:
    """Closed-form force for oracles; no trainable parameters."""

    def __init__(self, fn, jacobian_fn=None, dim=None):
        self._fn = fn
        self._jac = jacobian_fn
        self.dim = dim

    def eval(self, x):
        return self._fn(np.asarray(x, dtype=float))

    def eval_vjp(self, x, cotangent):
        if self._jac is None:
            raise NotImplementedError("analytic force has no Jacobian")
        jac = self._jac(np.atleast_2d(np.asarray(x, dtype=float)))
        xbar = np.einsum("nij,ni->nj", jac, np.atleast_2d(cotangent))
        return self.eval(np.atleast_2d(x)), None, xbar

    def jacobian(self, x):
        return self._jac(np.asarray(x, dtype=float))

    def params(self):
        return []

    def zero_grads(self):
        return []


# ---------------------------------------------------------------------------
# Noise models
# ---------------------------------------------------------------------------


class ZeroNoise:
    """D = 0 ablation (TrajectoryNet-like): the flow is the bare force ODE."""

    def apply(self, x, s):
        return np.zeros_like(np.atleast_2d(s))

    def divergence(self, x):
        return np.zeros_like(np.atleast_2d(x))

    def apply_transpose(self, x, w):
        return np.zeros_like(np.atleast_2d(w))

    def x_vjp_extra(self, x, s, w):
        return np.zeros_like(np.atleast_2d(x))


class AdditiveNoise:
    """Constant SPD diffusion matrix; div D = 0."""

    def __init__(self, d_mat):
        self.d_mat = np.asarray(d_mat, dtype=float)

    def apply(self, x, s):
        return np.atleast_2d(s) @ self.d_mat.T

    def divergence(self, x):
        return np.zeros_like(np.atleast_2d(x))

    def apply_transpose(self, x, w):
        return np.atleast_2d(w) @ self.d_mat

    def x_vjp_extra(self, x, s, w):
        # neither D nor div D depends on x
        return np.zeros_like(np.atleast_2d(x))


class AnalyticNoise:
    """State-dependent D(x) given in closed form (evaluation only).

    Supplies the velocity for multiplicative-noise oracles; training
    against a state-dependent known D would additionally need the x
    derivatives, which the built-in benchmarks do not require.
    """

    def __init__(self, d_fn, div_fn):
        self._d = d_fn
        self._div = div_fn

    def apply(self, x, s):
        d = self._d(np.atleast_2d(x))
        return np.einsum("nij,nj->ni", d, np.atleast_2d(s))

    def divergence(self, x):
        return self._div(np.atleast_2d(x))

    def apply_transpose(self, x, w):
        d = self._d(np.atleast_2d(x))
        return np.einsum("nji,nj->ni", d, np.atleast_2d(w))

    def x_vjp_extra(self, x, s, w):
        raise NotImplementedError("adjoint through analytic multiplicative noise")


def noise_from_spec(spec):
    """Noise model for a DiffusionSpec (additive -> AdditiveNoise)."""
    if spec.noise_kind == "additive":
        return AdditiveNoise(spec.constant_d)
    return AnalyticNoise(spec.diffusion, spec.diffusion_divergence)


# ---------------------------------------------------------------------------
# Flow fields
# ---------------------------------------------------------------------------


@dataclass
class FlowTrace:
    """States at every Euler substep plus the (possibly shortened) step sizes."""

    states: list  # n_sub + 1 arrays of shape (N, d)
    ts: np.ndarray  # substep start times, length n_sub
    hs: np.ndarray  # substep sizes, length n_sub
    field: object

    @property
    def n_substeps(self):
        return len(self.hs)


class DriftFlowField:
    """Velocity f(x) - div D(x) - D(x) s~(x, t) with a frozen score."""

    def __init__(self, force, noise, score):
        self.force = force
        self.noise = noise if noise is not None else ZeroNoise()
        self.score = score

    def velocity(self, x, t):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        vel = np.atleast_2d(self.force.eval(xb)) - self.noise.divergence(xb)
        if self.score is not None and not isinstance(self.noise, ZeroNoise):
            s = self.score.value(xb, t)
            vel = vel - self.noise.apply(xb, s)
        return vel

    def velocity_vjp(self, x, t, wbar):
        """Accumulates (param grads, xbar) of wbar . velocity(x, t)."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        wb = np.atleast_2d(np.asarray(wbar, dtype=float))
        _, grads, xbar = self.force.eval_vjp(xb, wb)
        if self.score is not None and not isinstance(self.noise, ZeroNoise):
            s = self.score.value(xb, t)
            dw = self.noise.apply_transpose(xb, wb)
            xbar = xbar - self.score.x_vjp(xb, t, dw)
            xbar = xbar - self.noise.x_vjp_extra(xb, s, wb)
        return grads, xbar

    def params(self):
        return self.force.params()

    def zero_grads(self):
        return self.force.zero_grads()


def _softplus(y):
    return np.log1p(np.exp(-np.abs(y))) + np.maximum(y, 0.0)


def _sigmoid(y):
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ey = np.exp(y[~pos])
    out[~pos] = ey / (1.0 + ey)
    return out


class RateModel:
    """Two-output network for the Schlogl rates: u, v = softplus(net(x)).

    Softplus keeps the volumetric rates nonnegative. rates() also returns
    the input derivatives u', v' via the tangent pass; the CLE velocity
    needs them for the spurious-drift term.
    """

    def __init__(self, net, x_mean=0.0, x_std=1.0):
        if net.d_in != 1 or net.d_out != 2:
            raise DimensionMismatch("rate net must map 1 input to 2 outputs")
        self.net = net
        self.x_mean = float(x_mean)
        self.x_std = float(x_std)

    def _norm(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, 1) - self.x_mean) / self.x_std

    def rates(self, x):
        """Returns (u, v, du/dx, dv/dx) as 1D arrays."""
        u, v, ux, vx, _, _ = self._rates_cached(x)
        return u, v, ux, vx

    def _rates_cached(self, x):
        z = self._norm(x)
        tangent = np.full_like(z, 1.0 / self.x_std)
        y, dy, cache = nn.forward_tangent(self.net, z, tangent)
        sig = _sigmoid(y)
        u_v = _softplus(y)
        duv = sig * dy
        return u_v[:, 0], u_v[:, 1], duv[:, 0], duv[:, 1], (y, dy, sig), cache

    def rates_vjp(self, x, ubar, vbar, uxbar, vxbar):
        """Param and x grads of a scalar with the given rate cotangents."""
        u, v, ux, vx, (y, dy, sig), cache = self._rates_cached(x)
        ybar = np.column_stack([ubar, vbar]) * sig
        # d/dy of sigmoid(y) * dy term: sig' * dy * uxbar
        ybar += np.column_stack([uxbar, vxbar]) * (sig * (1.0 - sig)) * dy
        dybar = np.column_stack([uxbar, vxbar]) * sig
        grads, zbar, _ = nn.backward_tangent(self.net, cache, ybar, dybar)
        return grads, zbar[:, 0] / self.x_std, (u, v, ux, vx)

    def params(self):
        return self.net.params()

    def zero_grads(self):
        return self.net.zero_grads()


class CleFlowField:
    """1D probability flow of the CLE with learnable rates u, v.

    velocity = (1 - s/2V) u - (1 + s/2V) v - (u' + v') / 2V, which is the
    generic flow with D = (u + v) / 2V and div D = (u' + v') / 2V.
    """

    def __init__(self, rate_model, volume, score):
        self.rate_model = rate_model
        self.volume = float(volume)
        self.score = score

    def velocity(self, x, t):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        u, v, ux, vx = self.rate_model.rates(xb[:, 0])
        s = np.atleast_2d(self.score.value(xb, t))[:, 0]
        tv = 2.0 * self.volume
        vel = (1.0 - s / tv) * u - (1.0 + s / tv) * v - (ux + vx) / tv
        return vel[:, None]

    def velocity_vjp(self, x, t, wbar):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        w = np.atleast_2d(np.asarray(wbar, dtype=float))[:, 0]
        s = np.atleast_2d(self.score.value(xb, t))[:, 0]
        tv = 2.0 * self.volume
        ubar = (1.0 - s / tv) * w
        vbar = -(1.0 + s / tv) * w
        uxbar = -w / tv
        vxbar = -w / tv
        grads, xrow, (u, v, _, _) = self.rate_model.rates_vjp(xb[:, 0], ubar, vbar, uxbar, vxbar)
        sbar = -((u + v) / tv) * w
        xbar = xrow[:, None] + self.score.x_vjp(xb, t, sbar[:, None])
        return grads, xbar

    def params(self):
        return self.rate_model.params()

    def zero_grads(self):
        return self.rate_model.zero_grads()


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------


def flow_velocity(field, x, t):
    """Evaluate the flow velocity; warns when t leaves the score's range."""
    score = getattr(field, "score", None)
    if isinstance(score, TrainedScore) and not (score.t_lo <= t <= score.t_hi):
        warnings.warn(f"t={t:g} outside score training range [{score.t_lo:g}, {score.t_hi:g}]", SupportEscapeWarning)
    vel = field.velocity(x, t)
    if not np.all(np.isfinite(vel)):
        raise NonFinite(f"flow velocity non-finite at t={t:g}")
    return vel[0] if np.asarray(x).ndim == 1 else vel


def _substep_schedule(t_from, t_to, h):
    span = t_to - t_from
    n = max(1, int(np.ceil(span / h - 1e-12)))
    hs = np.full(n, h)
    hs[-1] = span - (n - 1) * h
    ts = t_from + np.concatenate([[0.0], np.cumsum(hs[:-1])])
    return ts, hs


def integrate(field, particles, t_from, t_to, h):
    """Explicit-Euler rollout; returns (final particles, FlowTrace)."""
    if t_to <= t_from:
        raise ValueError("t_to must exceed t_from")
    if h <= 0 or h > (t_to - t_from) + 1e-12:
        raise ValueError("need 0 < h <= t_to - t_from")
    x = np.atleast_2d(np.asarray(particles, dtype=float)).copy()
    ts, hs = _substep_schedule(t_from, t_to, h)
    states = [x.copy()]
    for m in range(len(hs)):
        vel = field.velocity(x, ts[m])
        if not np.all(np.isfinite(vel)):
            bad = np.where(~np.all(np.isfinite(vel), axis=1))[0]
            raise NonFinite(f"non-finite velocity at substep {m}, particles {bad[:5].tolist()}")
        x = x + hs[m] * vel
        states.append(x.copy())
    return x, FlowTrace(states=states, ts=ts, hs=hs, field=field)


def integrate_backward_adjoint(trace, loss_grad_at_end, field=None):
    """Exact gradient of the Euler-discretized map.

    Returns (param grads accumulated over substeps, adjoint at the initial
    particles). The trace must come from integrate() with the same field.
    """
    if field is None:
        field = trace.field
    if field is not trace.field:
        raise TraceMismatch("trace was produced by a different field")
    lam = np.atleast_2d(np.asarray(loss_grad_at_end, dtype=float)).copy()
    if lam.shape != trace.states[-1].shape:
        raise TraceMismatch("loss gradient shape does not match final particles")
    grads = field.zero_grads()
    for m in range(trace.n_substeps - 1, -1, -1):
        x_m = trace.states[m]
        g_m, xbar = field.velocity_vjp(x_m, trace.ts[m], lam)
        if g_m is not None:
            for acc, g in zip(grads, g_m):
                acc += trace.hs[m] * g
        lam = lam + trace.hs[m] * xbar
    return grads, lam
