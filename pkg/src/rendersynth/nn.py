"""Minimal numpy layers with explicit backward passes, plus Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAK = 0.2


def leaky_relu(x):
    return np.where(x > 0, x, LEAK * x)


def leaky_relu_vjp(x, g):
    return np.where(x > 0, g, LEAK * g)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # split by sign to stay finite for large |x|
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dense(params: dict, prefix: str, x):
    return x @ params[prefix + ".W"] + params[prefix + ".b"]


def dense_vjp(params: dict, prefix: str, x, g, grads: dict):
    grads[prefix + ".W"] = x.T @ g
    grads[prefix + ".b"] = g.sum(axis=0)
    return g @ params[prefix + ".W"].T


def init_dense(rng: np.random.Generator, params: dict, prefix: str, n_in: int, n_out: int, std: float | None = None):
    std = np.sqrt(2.0 / n_in) if std is None else std
    params[prefix + ".W"] = rng.normal(0.0, std, (n_in, n_out)) if std > 0 else np.zeros((n_in, n_out))
    params[prefix + ".b"] = np.zeros(n_out)


def conv2d(params: dict, prefix: str, x, stride: int = 2, pad: int = 1):
    """Cross-correlation of ``x`` (N, C, H, W) with ``W`` (O, C, k, k) plus bias."""
    w = params[prefix + ".W"]
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out + params[prefix + ".b"][None, :, None, None]


def conv2d_vjp(params: dict, prefix: str, x, g, grads: dict, stride: int = 2, pad: int = 1):
    w = params[prefix + ".W"]
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = g.shape[2], g.shape[3]
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[sl])
            gxp[sl] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j])
    grads[prefix + ".W"] = gw
    grads[prefix + ".b"] = g.sum(axis=(0, 2, 3))
    return gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]


def init_conv(rng: np.random.Generator, params: dict, prefix: str, c_in: int, c_out: int, k: int = 4):
    std = np.sqrt(2.0 / (c_in * k * k))
    params[prefix + ".W"] = rng.normal(0.0, std, (c_out, c_in, k, k))
    params[prefix + ".b"] = np.zeros(c_out)


def avg_pool(x, factor: int):
    if factor == 1:
        return x
    h, w = x.shape[-2], x.shape[-1]
    return x.reshape(x.shape[:-2] + (h // factor, factor, w // factor, factor)).mean(axis=(-3, -1))


def avg_pool_vjp(g, factor: int):
    if factor == 1:
        return g
    return np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1) / factor**2


@dataclass
class Adam:
    """Adam with bias correction; one state entry per named parameter."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict) -> None:
        self.step += 1
        c1 = 1 - self.beta1**self.step
        c2 = 1 - self.beta2**self.step
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            if self.lr == 0:
                continue
            params[name] = params[name] - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
