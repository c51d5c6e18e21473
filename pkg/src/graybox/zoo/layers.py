"""Parameter initialisation, shared layers and the Adam training step."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .. import autodiff as ad
from .. import seeding


class TrainingFailure(RuntimeError):
    """A model finished its epoch budget below the accuracy floor."""


def he_init(seed: int, name: str, shape, fan_in: int) -> np.ndarray:
    return seeding.rng(seed, "init", name).normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def add_linear(params: dict, seed: int, name: str, n_in: int, n_out: int):
    params[f"{name}.w"] = he_init(seed, name, (n_in, n_out), n_in)
    params[f"{name}.b"] = np.zeros(n_out)


def add_conv(params: dict, seed: int, name: str, k: int, c_in: int, c_out: int):
    params[f"{name}.w"] = he_init(seed, name, (k, k, c_in, c_out), k * k * c_in)
    params[f"{name}.b"] = np.zeros(c_out)


def linear(P: Mapping[str, ad.Node], name: str, x: ad.Node) -> ad.Node:
    y = x @ P[f"{name}.w"]
    return y + ad.broadcast_to(P[f"{name}.b"], y.shape)


# fixed input standardization shared by every image network; roughly
# centres the renderer's pixel distribution and gives it unit spread
PIXEL_MEAN = 0.25
PIXEL_SCALE = 0.1


def standardize(x: ad.Node) -> ad.Node:
    return (x - PIXEL_MEAN) * (1.0 / PIXEL_SCALE)


def conv(P: Mapping[str, ad.Node], name: str, x: ad.Node, stride: int = 2) -> ad.Node:
    k = P[f"{name}.w"].shape[0]
    y = ad.conv2d(x, P[f"{name}.w"], stride=stride, pad=k // 2)
    return ad.relu(y + ad.broadcast_to(P[f"{name}.b"], y.shape))


def nodes(params: Mapping[str, np.ndarray], trainable: bool = False, prefix: str = "") -> dict:
    """Wrap a parameter dict as graph leaves (``var`` when trainable)."""
    make = ad.var if trainable else (lambda n, v: ad.const(v, n))
    return {k: make(prefix + k, v) for k, v in params.items()}


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 3e-3,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fit(params: dict[str, np.ndarray], loss_fn, n: int, *, seed: int, epochs: int,
        batch_size: int, lr: float):
    """Minibatch Adam over ``n`` examples. ``loss_fn(P, idx)`` returns a scalar node."""
    opt = Adam(params, lr=lr)
    names = sorted(params)
    for epoch in range(epochs):
        order = seeding.rng(seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            P = nodes(params, trainable=True)
            loss = loss_fn(P, idx)
            grads = ad.backprop(loss, [P[k] for k in names])
            opt.step(dict(zip(names, grads)))
    return params
