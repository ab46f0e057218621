"""Tiny numpy function approximators with hand-written backprop.

Everything here is deliberately explicit: forward passes cache what the
backward pass needs, gradients accumulate into .gW/.gb until zero_grads(), and
parameters are plain numpy arrays updated in place by Adam. The flat-vector
helpers exist so tests can compare every analytic gradient against central
finite differences.

Gaussian heads split a network's raw output into (mu, log_sigma) with
log_sigma clipped to fixed bounds; gradients do not flow through clipped
coordinates.
"""

from __future__ import annotations

import math

import numpy as np

from .blobio import read_blob, write_blob

LOG_SIGMA_BOUNDS = (-5.0, 2.0)
LOG_2PI = math.log(2.0 * math.pi)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(name, z):
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "swish":
        return z * _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z):
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(float)
    if name == "swish":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected net; forward() caches, backward() returns grad wrt input."""

    def __init__(self, layer_dims, activations=None, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        n_layers = len(layer_dims) - 1
        if activations is None:
            activations = ["swish"] * (n_layers - 1) + ["linear"]
        if len(activations) != n_layers:
            raise ValueError("need one activation per layer")
        self.layer_dims = list(layer_dims)
        self.activations = list(activations)
        self.W = [rng.normal(0.0, 1.0 / math.sqrt(layer_dims[i]),
                             size=(layer_dims[i], layer_dims[i + 1]))
                  for i in range(n_layers)]
        self.b = [np.zeros(layer_dims[i + 1]) for i in range(n_layers)]
        self.gW = [np.zeros_like(w) for w in self.W]
        self.gb = [np.zeros_like(b) for b in self.b]
        self._cache = None

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cache = []
        for w, b, act in zip(self.W, self.b, self.activations):
            z = x @ w + b
            cache.append((x, z))
            x = _act(act, z)
        self._cache = cache
        return x

    def backward(self, grad_out):
        """Accumulate parameter grads; return the gradient wrt the input batch."""
        if self._cache is None:
            raise RuntimeError("backward() before forward()")
        grad = np.asarray(grad_out, dtype=float)
        for (x, z), w, act, gw, gb in zip(self._cache[::-1], self.W[::-1],
                                          self.activations[::-1],
                                          self.gW[::-1], self.gb[::-1]):
            dz = grad * _act_grad(act, z)
            gw += x.T @ dz
            gb += dz.sum(axis=0)
            grad = dz @ w.T
        return grad

    def zero_grads(self):
        for g in self.gW + self.gb:
            g[:] = 0.0

    def params(self):
        return self.W + self.b

    def grads(self):
        return self.gW + self.gb


def flat_params(nets) -> np.ndarray:
    return np.concatenate([p.ravel() for net in nets for p in net.params()])


def set_flat_params(nets, vec) -> None:
    off = 0
    for net in nets:
        for p in net.params():
            p[:] = vec[off : off + p.size].reshape(p.shape)
            off += p.size
    if off != len(vec):
        raise ValueError("parameter vector length mismatch")


def flat_grads(nets) -> np.ndarray:
    return np.concatenate([g.ravel() for net in nets for g in net.grads()])


class GaussianHead:
    """(mu, log_sigma) view of a raw (batch, 2d) output, log_sigma clipped."""

    def __init__(self, raw, bounds=LOG_SIGMA_BOUNDS):
        raw = np.atleast_2d(raw)
        if raw.shape[1] % 2:
            raise ValueError("gaussian head needs an even output width")
        d = raw.shape[1] // 2
        self.mu = raw[:, :d]
        ls_raw = raw[:, d:]
        self.log_sigma = np.clip(ls_raw, bounds[0], bounds[1])
        self._pass = (ls_raw > bounds[0]) & (ls_raw < bounds[1])

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    def raw_grad(self, d_mu, d_log_sigma):
        """Assemble the gradient wrt the raw output; clipped coords get zero."""
        return np.concatenate([d_mu, d_log_sigma * self._pass], axis=1)

    def sample(self, rng: np.random.Generator, eps=None):
        """Reparameterized draw mu + sigma * eps; returns (sample, eps)."""
        if eps is None:
            eps = rng.standard_normal(self.mu.shape)
        return self.mu + self.sigma * eps, eps


def gaussian_nll(head: GaussianHead, target) -> np.ndarray:
    """Per-sample negative log likelihood, summed over dimensions."""
    target = np.atleast_2d(target)
    z = (target - head.mu) / head.sigma
    return (0.5 * z * z + head.log_sigma + 0.5 * LOG_2PI).sum(axis=1)


def gaussian_nll_grads(head: GaussianHead, target):
    """(d_mu, d_log_sigma) of the per-sample NLL (before any batch scaling)."""
    target = np.atleast_2d(target)
    inv_var = np.exp(-2.0 * head.log_sigma)
    d_mu = (head.mu - target) * inv_var
    d_ls = 1.0 - (target - head.mu) ** 2 * inv_var
    return d_mu, d_ls


def gaussian_nll_loss(net: Mlp, x, target, bounds=LOG_SIGMA_BOUNDS) -> float:
    """Mean NLL of net(x) against target; accumulates grads into net."""
    raw = net.forward(x)
    head = GaussianHead(raw, bounds)
    nll = gaussian_nll(head, target)
    n = nll.shape[0]
    d_mu, d_ls = gaussian_nll_grads(head, target)
    net.backward(head.raw_grad(d_mu / n, d_ls / n))
    return float(nll.mean())


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m[:] = self.b1 * m + (1.0 - self.b1) * g
            v[:] = self.b2 * v + (1.0 - self.b2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def save_mlp(net: Mlp, path, extra_header=None) -> None:
    header = {"format": "romilab-mlp-v1", "layer_dims": net.layer_dims,
              "activations": net.activations}
    if extra_header:
        header.update(extra_header)
    write_blob(path, header, net.W + net.b)


def load_mlp(path) -> Mlp:
    header, arrays = read_blob(path)
    if header.get("format") != "romilab-mlp-v1":
        raise ValueError(f"{path} is not an mlp checkpoint")
    net = Mlp(header["layer_dims"], header["activations"])
    n = len(net.W)
    for i in range(n):
        net.W[i][:] = arrays[i]
        net.b[i][:] = arrays[n + i]
    return net
