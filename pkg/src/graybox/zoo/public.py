"""Public image classifiers trained on the generic object task only.

They stand in for off-the-shelf vision models: a no-access attacker can use
their final convolution feature maps but they never saw a meme label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .. import synth, tensorio
from .layers import add_conv, add_linear, conv, fit, linear, nodes, standardize

# (kernel size, channels of conv1, channels of conv2)
ARCHITECTURES = [(3, 8, 16), (5, 8, 16), (3, 12, 24)]


@dataclass
class PublicModel:
    name: str
    arch: tuple[int, int, int]
    params: dict[str, np.ndarray]
    seed: int
    heldout_accuracy: float | None = None

    def nodes(self) -> dict:
        return nodes(self.params)

    def to_file(self, path) -> str:
        return tensorio.save(path, self.params, {
            "kind": "public", "name": self.name, "arch": list(self.arch),
            "seed": self.seed, "heldout_accuracy": self.heldout_accuracy,
        })

    @classmethod
    def from_file(cls, path) -> "PublicModel":
        params, meta = tensorio.load(path)
        if meta.get("kind") != "public":
            raise ValueError(f"{path}: not a public model file")
        return cls(meta["name"], tuple(meta["arch"]), params, meta["seed"], meta["heldout_accuracy"])


def feature_map(P, x: ad.Node) -> ad.Node:
    """Final convolution feature map."""
    return conv(P, "conv2", conv(P, "conv1", standardize(x)))


def _logits(P, x: ad.Node) -> ad.Node:
    return linear(P, "fc", ad.mean(feature_map(P, x), axis=(1, 2)))


def train_public(name: str, arch, images: np.ndarray, glyphs, seed: int, *,
                 heldout=None, epochs: int = 10, batch_size: int = 50,
                 lr: float = 3e-3) -> PublicModel:
    k, c1, c2 = arch
    params: dict[str, np.ndarray] = {}
    add_conv(params, seed, "conv1", k, synth.CHANNELS, c1)
    add_conv(params, seed, "conv2", k, c1, c2)
    add_linear(params, seed, "fc", c2, synth.N_VISUAL)
    onehot = np.eye(synth.N_VISUAL)[[g.concept for g in glyphs]]

    def loss_fn(P, idx):
        return ad.mean(ad.bce_with_logits(_logits(P, ad.const(images[idx])), onehot[idx]))

    fit(params, loss_fn, len(images), seed=seed, epochs=epochs, batch_size=batch_size, lr=lr)
    ev_images, ev_glyphs = heldout if heldout is not None else (images, glyphs)
    P = nodes(params)
    pred = np.concatenate([_logits(P, ad.const(ev_images[s:s + 100])).value.argmax(axis=1)
                           for s in range(0, len(ev_images), 100)])
    acc = float(np.mean(pred == np.array([g.concept for g in ev_glyphs])))
    return PublicModel(name, tuple(arch), params, seed, acc)
