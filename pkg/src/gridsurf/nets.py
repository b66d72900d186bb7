"""Shallow decoder MLPs, frequency positional encoding, per-frame latent
embeddings, and ADAM with exponential learning-rate decay.

Forward passes return an explicit cache consumed exactly once by the
matching backward pass; parameter gradients accumulate on the network.
"""

import warnings

import numpy as np


def pe_forward(x, levels):
    """concat(x, sin(2^k pi x), cos(2^k pi x)) for k = 0..levels-1.

    x: (N, D).  Output: (N, D * (1 + 2 * levels)).
    """
    x = np.atleast_2d(x)
    parts = [x]
    for k in range(levels):
        a = (2.0 ** k) * np.pi * x
        parts.append(np.sin(a))
        parts.append(np.cos(a))
    return np.concatenate(parts, axis=-1)


def pe_backward(x, levels, upstream):
    """dL/dx given dL/d(encoding); x as passed to pe_forward."""
    x = np.atleast_2d(x)
    D = x.shape[-1]
    dx = upstream[:, :D].copy()
    col = D
    for k in range(levels):
        f = (2.0 ** k) * np.pi
        a = f * x
        dx += upstream[:, col:col + D] * f * np.cos(a)
        col += D
        dx -= upstream[:, col:col + D] * f * np.sin(a)
        col += D
    return dx


def positional_encode(d, levels=4):
    """Encode a unit direction; non-unit inputs are normalized with a warning."""
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        warnings.warn("positional_encode: non-unit direction, normalizing")
        d = d / norms[:, None]
    out = pe_forward(d, levels)
    return out[0] if single else out


def pe_output_dim(input_dim, levels):
    return input_dim * (1 + 2 * levels)


def xavier_init(fan_in, fan_out, rng):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Mlp:
    """Fully connected net: ReLU hidden layers, linear or sigmoid output."""

    def __init__(self, sizes, rng, output_activation=None, out_bias=None,
                 zero_last=False):
        self.sizes = list(sizes)
        self.output_activation = output_activation
        self.W = []
        self.b = []
        for i in range(len(sizes) - 1):
            self.W.append(xavier_init(sizes[i], sizes[i + 1], rng))
            self.b.append(np.zeros(sizes[i + 1]))
        if zero_last:
            self.W[-1][...] = 0.0
        if out_bias is not None:
            self.b[-1][...] = out_bias
        self.gW = [np.zeros_like(w) for w in self.W]
        self.gb = [np.zeros_like(v) for v in self.b]

    @property
    def n_params(self):
        return sum(w.size for w in self.W) + sum(v.size for v in self.b)

    def zero_grads(self):
        for g in self.gW:
            g[...] = 0.0
        for g in self.gb:
            g[...] = 0.0

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(
                f"input dim {x.shape[-1]} != expected {self.sizes[0]}")
        acts = [x]
        h = x
        n = len(self.W)
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = h @ W + b
            if i < n - 1:
                h = np.maximum(h, 0.0)
            elif self.output_activation == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-h))
            acts.append(h)
        cache = {"acts": acts, "used": False}
        return h, cache

    def backward(self, cache, upstream):
        """Accumulate parameter grads; return dL/dinput."""
        if cache["used"]:
            raise RuntimeError("backward cache already consumed")
        cache["used"] = True
        acts = cache["acts"]
        dh = np.atleast_2d(upstream)
        n = len(self.W)
        if self.output_activation == "sigmoid":
            y = acts[-1]
            dh = dh * y * (1.0 - y)
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                dh = dh * (acts[i + 1] > 0)
            self.gW[i] += acts[i].T @ dh
            self.gb[i] += dh.sum(axis=0)
            dh = dh @ self.W[i].T
        return dh


class EmbeddingTable:
    """One trainable latent vector per frame."""

    def __init__(self, n_frames, length):
        self.values = np.zeros((n_frames, length))
        self.grads = np.zeros_like(self.values)

    @property
    def length(self):
        return self.values.shape[1]

    def zero_grads(self):
        self.grads[...] = 0.0


def lr_schedule(lr0, iteration, decay_every=250000):
    """Continuous exponential decay: a tenth every `decay_every` iterations."""
    return lr0 * 10.0 ** (-iteration / decay_every)


class Adam:
    """ADAM with bias correction over a dict of named parameter arrays."""

    def __init__(self, lr0=5e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_every=250000):
        self.lr0 = lr0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_every = decay_every
        self.m = {}
        self.v = {}
        self.t = {}

    def reset(self, name):
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)

    def step(self, params, grads, iteration):
        """Update each named array in place at the scheduled learning rate."""
        lr = lr_schedule(self.lr0, iteration, self.decay_every)
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in '{name}'")
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
