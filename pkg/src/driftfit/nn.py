"""Fully connected network with sine activations and hand-rolled gradients.

The topology is fixed (affine layers, sin on hidden layers, identity
output), which lets us write the three passes we actually need directly:

* ``forward`` / ``backward``: reverse-mode gradients w.r.t. parameters and
  inputs for a batch.
* ``forward_tangent`` / ``backward_tangent``: the same network augmented
  with a forward-mode tangent (a JVP carried alongside the primal). The
  tangent output is J(x) @ v, and reverse-mode through the doubled graph
  yields exact gradients of any function of (output, tangent output) with
  respect to parameters and inputs -- the second-order quantity sliced
  score matching and the joint CLE velocity both need.

All arrays are float64; batches are row-major (N, dim).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .numkit import DimensionMismatch


class ShapeMismatch(ValueError):
    pass


class MlpModel:
    """Weights/biases for layer_sizes = [d_in, hidden..., d_out]."""

    def __init__(self, layer_sizes, w0=1.0, rng=None):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layer_sizes = list(int(s) for s in layer_sizes)
        self.w0 = float(w0)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            if rng is None:
                w = np.zeros((fan_out, fan_in))
            else:
                w = rng.uniform(-bound, bound, (fan_out, fan_in))
            self.weights.append(np.asarray(w, dtype=float))
            self.biases.append(np.zeros(fan_out))

    @property
    def d_in(self):
        return self.layer_sizes[0]

    @property
    def d_out(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self):
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def params_flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def set_params_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        pos = 0
        for p in self.params():
            n = p.size
            p[...] = flat[pos : pos + n].reshape(p.shape)
            pos += n
        if pos != flat.size:
            raise ShapeMismatch("flat parameter vector has wrong length")

    def copy(self):
        other = MlpModel(self.layer_sizes, w0=self.w0)
        for i in range(self.n_layers):
            other.weights[i] = self.weights[i].copy()
            other.biases[i] = self.biases[i].copy()
        return other

    def zero_grads(self):
        return [np.zeros_like(p) for p in self.params()]


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != dim:
        raise DimensionMismatch(f"expected inner dim {dim}, got {x.shape[1]}")
    return x, single


def forward(model, x):
    """Evaluate the network; accepts a single vector or a batch."""
    xb, single = _as_batch(x, model.d_in)
    a = xb
    last = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = z if l == last else np.sin(model.w0 * z)
    return a[0] if single else a


def forward_cache(model, x):
    xb, single = _as_batch(x, model.d_in)
    acts = [xb]
    zs = []
    a = xb
    last = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        zs.append(z)
        a = z if l == last else np.sin(model.w0 * z)
        acts.append(a)
    return a, (acts, zs, single)


def backward(model, cache, out_bar):
    """Reverse sweep. Returns (param grads in params() order, input grads)."""
    acts, zs, single = cache
    out_bar = np.asarray(out_bar, dtype=float)
    if single and out_bar.ndim == 1:
        out_bar = out_bar[None, :]
    if out_bar.shape != acts[-1].shape:
        raise DimensionMismatch("adjoint shape does not match output")
    w0 = model.w0
    grads = [None] * (2 * model.n_layers)
    zbar = out_bar
    for l in range(model.n_layers - 1, -1, -1):
        grads[2 * l] = zbar.T @ acts[l]
        grads[2 * l + 1] = zbar.sum(axis=0)
        abar = zbar @ model.weights[l]
        if l > 0:
            zbar = abar * (w0 * np.cos(w0 * zs[l - 1]))
        else:
            xbar = abar
    return grads, (xbar[0] if single else xbar)


def forward_tangent(model, x, v):
    """Forward pass carrying a tangent: returns (y, J(x) @ v, cache)."""
    xb, single = _as_batch(x, model.d_in)
    vb, _ = _as_batch(v, model.d_in)
    if vb.shape != xb.shape:
        raise DimensionMismatch("tangent batch must match input batch")
    w0 = model.w0
    acts = [xb]
    tans = [vb]
    zs = []
    zdots = []
    a, c = xb, vb
    last = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        zdot = c @ w.T
        zs.append(z)
        zdots.append(zdot)
        if l == last:
            a, c = z, zdot
        else:
            a = np.sin(w0 * z)
            c = (w0 * np.cos(w0 * z)) * zdot
        acts.append(a)
        tans.append(c)
    cache = (acts, tans, zs, zdots, single)
    if single:
        return a[0], c[0], cache
    return a, c, cache


def backward_tangent(model, cache, out_bar, tan_bar):
    """Reverse sweep through the primal+tangent graph.

    Returns (param grads, input grads, tangent-input grads); the input
    grads include second-order contributions that flow through the tangent
    path, so they are exact gradients of any scalar built from the two
    outputs.
    """
    acts, tans, zs, zdots, single = cache
    out_bar = np.asarray(out_bar, dtype=float)
    tan_bar = np.asarray(tan_bar, dtype=float)
    if single:
        if out_bar.ndim == 1:
            out_bar = out_bar[None, :]
        if tan_bar.ndim == 1:
            tan_bar = tan_bar[None, :]
    if out_bar.shape != acts[-1].shape or tan_bar.shape != acts[-1].shape:
        raise DimensionMismatch("adjoint shapes do not match outputs")
    w0 = model.w0
    grads = [None] * (2 * model.n_layers)
    zbar = out_bar
    tbar = tan_bar
    for l in range(model.n_layers - 1, -1, -1):
        grads[2 * l] = zbar.T @ acts[l] + tbar.T @ tans[l]
        grads[2 * l + 1] = zbar.sum(axis=0)
        abar = zbar @ model.weights[l]
        cbar = tbar @ model.weights[l]
        if l > 0:
            cos_term = w0 * np.cos(w0 * zs[l - 1])
            sin_term = -(w0 * w0) * np.sin(w0 * zs[l - 1])
            zbar = abar * cos_term + cbar * sin_term * zdots[l - 1]
            tbar = cbar * cos_term
        else:
            xbar, vbar = abar, cbar
    if single:
        return grads, xbar[0], vbar[0]
    return grads, xbar, vbar


def grad_params(model, loss_adjoint, x):
    """Gradient of adjoint . forward(x) with respect to the parameters."""
    _, cache = forward_cache(model, x)
    grads, _ = backward(model, cache, loss_adjoint)
    return grads


def input_jacobian(model, x):
    """Exact Jacobian d out / d in, shape (d_out, d_in) or (N, d_out, d_in)."""
    xb, single = _as_batch(x, model.d_in)
    n, d_in = xb.shape
    x_rep = np.repeat(xb, d_in, axis=0)
    v = np.tile(np.eye(d_in), (n, 1))
    _, dy, _ = forward_tangent(model, x_rep, v)
    jac = dy.reshape(n, d_in, model.d_out).transpose(0, 2, 1)
    return jac[0] if single else jac


def sliced_jacobian_form(model, x, v):
    """Return (s(x), v . (ds/dx) v); averaging over random v estimates tr(ds/dx)."""
    if model.d_in != model.d_out:
        raise DimensionMismatch("quadratic slice needs d_in == d_out")
    y, dy, _ = forward_tangent(model, x, v)
    return y, float(np.dot(np.asarray(v, dtype=float), dy))


@dataclass
class AdamState:
    """Adam moments; shapes mirror the parameter list they were built from."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(state, params, grads):
    """Standard Adam update with bias correction, applied in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeMismatch("parameter/gradient lists do not match state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def model_to_dict(model):
    return {
        "layer_sizes": model.layer_sizes,
        "activation": "sine",
        "w0": model.w0,
        "params": model.params_flat().tolist(),
    }


def model_from_dict(payload):
    if payload.get("activation") != "sine":
        raise ValueError("unsupported activation in checkpoint")
    model = MlpModel(payload["layer_sizes"], w0=payload["w0"])
    model.set_params_flat(np.asarray(payload["params"], dtype=float))
    return model


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path):
    with open(path) as fh:
        payload = json.load(fh)
    return model_from_dict(payload)
