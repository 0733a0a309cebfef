"""Small numpy networks, optimizers and schedules.

Everything works on plain lists of arrays so that gradients can be checked
against finite differences without any autodiff machinery.
"""

from __future__ import annotations

import numpy as np


class MLP:
    """Fully connected network with tanh hidden layers and a linear head."""

    def __init__(self, sizes, rng=None, out_scale: float = 1.0):
        rng = np.random.default_rng(rng)
        self.sizes = tuple(int(s) for s in sizes)
        self.params = []
        n_layers = len(self.sizes) - 1
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = np.sqrt(1.0 / fan_in)
            if k == n_layers - 1:
                scale *= out_scale
            self.params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[1]}")
        acts = [x]
        h = x
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            h = h @ W + b
            if k < n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, dout):
        """Gradients of ``sum(dout * output)`` with respect to every parameter."""
        grads = [None] * len(self.params)
        n_layers = len(self.params) // 2
        d = dout
        for k in reversed(range(n_layers)):
            h_in = acts[k]
            grads[2 * k] = h_in.T @ d
            grads[2 * k + 1] = d.sum(axis=0)
            if k > 0:
                d = (d @ self.params[2 * k].T) * (1.0 - acts[k] ** 2)
        return grads

    def copy(self):
        new = MLP.__new__(MLP)
        new.sizes = self.sizes
        new.params = [p.copy() for p in self.params]
        return new


def flatten(arrays):
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec, like):
    out, k = [], 0
    for a in like:
        out.append(np.asarray(vec[k : k + a.size], dtype=float).reshape(a.shape))
        k += a.size
    return out


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, params, lr):
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


class LinearSchedule:
    """Linear interpolation from ``start`` to ``end`` over ``duration`` steps, then flat."""

    def __init__(self, start, end, duration):
        self.start, self.end, self.duration = float(start), float(end), max(int(duration), 1)

    def __call__(self, step):
        frac = min(max(step, 0) / self.duration, 1.0)
        return self.start + frac * (self.end - self.start)

    def to_list(self):
        return [self.start, self.end, self.duration]
