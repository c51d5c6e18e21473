"""Image-domain attacks for each threat model.

Every attack is a projected gradient descent on some differentiable loss of
the image. The batch functions (``*_images``) take stacked images and return
stacked adversarial images; per-meme wrappers return :class:`AttackResult`.
Each meme's loss depends only on its own image, so a batch is just many
independent attacks sharing matrix multiplies.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import synth
from .zoo import MultimodalModel, Prediction, PublicModel
from .zoo import detector as det
from .zoo import public as pub

LOSS_KINDS = ("adversarial-bce", "feature-vector-l2", "feature-map-l2", "negative-feature-map-l2")
THREATS = ("full-access", "dataset-access", "feature-extractor-access",
           "no-access-savvy", "no-access-naive")
STEP_RULES = ("sign", "gradient")
BUDGET_TOL = 1e-9


class AttackAbort(RuntimeError):
    """An attack could not proceed (non-finite gradient, divergence)."""


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    alpha: float = 0.05
    steps: int = 40
    loss: str = "adversarial-bce"
    threat: str = "full-access"
    step_rule: str = "gradient"
    # two-step region attack, step 1 (adversarial region vector)
    vector_lr: float = 1.0
    vector_steps: int = 100
    vector_target_loss: float = 0.05

    def __post_init__(self):
        if not 0 < self.alpha <= self.epsilon <= 1:
            raise AttackConfigError(f"need 0 < alpha <= epsilon <= 1, got {self.alpha}, {self.epsilon}")
        if self.steps < 0:
            raise AttackConfigError("steps must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise AttackConfigError(f"unknown loss kind {self.loss!r}")
        if self.step_rule not in STEP_RULES:
            raise AttackConfigError(f"unknown step rule {self.step_rule!r}")
        if self.threat not in THREATS:
            raise AttackConfigError(f"unknown threat model {self.threat!r}")

    def with_(self, **kw) -> "AttackConfig":
        return AttackConfig(**{**self.__dict__, **kw})


@dataclass
class AttackResult:
    meme_id: str
    clean_prediction: Prediction
    adversarial_prediction: Prediction
    success: bool
    linf: float
    wall_time: float = 0.0
    label: int | None = None
    aborted: bool = False
    note: str = ""


# ---------------------------------------------------------------- PGD core

def project(x: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip to the L-inf ball around ``x0``, then to the valid pixel range."""
    return np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def pgd(loss: Callable[[ad.Node], ad.Node], x0: np.ndarray, config: AttackConfig,
        init: np.ndarray | None = None) -> np.ndarray:
    """Iterate ``x <- Proj(x - alpha * step(grad L(x)))`` for ``config.steps`` steps.

    ``loss`` maps a batch of images to per-image losses (B,); the batch is
    descended on their sum. Each image gets back its lowest-loss iterate,
    which with sign steps is often not the last one. ``init`` is an optional
    starting point inside the ball (random restarts).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x = x0.copy() if init is None else project(np.array(init, dtype=np.float64), x0, config.epsilon)
    best, best_loss = x.copy(), np.full(len(x), np.inf)
    for i in range(config.steps + 1):
        xn = ad.var("image", x)
        per = loss(xn)
        better = per.value < best_loss
        best[better], best_loss[better] = x[better], per.value[better]
        if i == config.steps:
            break
        (g,) = ad.backprop(ad.sum_(per), [xn])
        if not np.all(np.isfinite(g)):
            raise AttackAbort(f"non-finite gradient at step {i}")
        step = np.sign(g) if config.step_rule == "sign" else g
        x = project(x - config.alpha * step, x0, config.epsilon)
    return best


def linf(x: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Per-image L-inf distance for stacked images."""
    d = np.abs(np.asarray(x) - np.asarray(x0))
    return d.reshape(d.shape[0], -1).max(axis=1)


def check_budget(x: np.ndarray, x0: np.ndarray, epsilon: float):
    if np.any(linf(x, x0) > epsilon + BUDGET_TOL) or x.min() < 0.0 or x.max() > 1.0:
        raise AssertionError("adversarial image outside the perturbation budget")


# ---------------------------------------------------------------- losses

def adversarial_bce_loss(model: MultimodalModel, texts: list[str], labels: np.ndarray, P=None):
    """Per-image BCE against the flipped ground-truth labels."""
    P = model.nodes() if P is None else P
    target = 1.0 - np.asarray(labels, dtype=np.float64)

    def loss(x: ad.Node) -> ad.Node:
        return ad.bce_with_logits(model.logits(x, texts, P), target)

    return loss


def feature_map_distance(fmap_fn, target_maps: np.ndarray, negative: bool = False):
    """Per-image ``||f(x_b) - z_b||_2`` (negated for the untargeted ensemble term)."""
    z = ad.const(target_maps)

    def loss(x: ad.Node) -> ad.Node:
        d = ad.l2norm(fmap_fn(x) - z, axis=(1, 2, 3))
        return -d if negative else d

    return loss


# ---------------------------------------------------------------- full access

def full_access_images(model: MultimodalModel, images: np.ndarray, texts: list[str],
                       labels: np.ndarray, config: AttackConfig) -> np.ndarray:
    if model.extractor != "grid":
        raise AttackConfigError("full-access PGD needs an end-to-end differentiable (grid) model; "
                                "use region_two_step_images for region models")
    return pgd(adversarial_bce_loss(model, texts, labels), images, config)


def adversarial_region_vector(model: MultimodalModel, images: np.ndarray, texts: list[str],
                              labels: np.ndarray, config: AttackConfig):
    """Step 1: one vector per meme that, prepended to the clean region features,
    drives the fusion model toward the adversarial label.

    Returns (vectors (B, d), initial losses, final losses, aborted mask).
    Plain gradient descent from the mean clean region feature, kept
    non-negative because region features are rectified outputs.
    """
    P = model.nodes()
    regions = det.extract_region_features(P, ad.const(images))[1].value
    y = regions.mean(axis=1, keepdims=True)
    target = 1.0 - np.asarray(labels, dtype=np.float64)
    b = len(images)
    rising = np.zeros(b, dtype=int)
    aborted = np.zeros(b, dtype=bool)
    active = np.ones(b, dtype=bool)
    first = prev = None
    for _ in range(config.vector_steps + 1):
        yn = ad.var("vector", y)
        tokens = ad.concat([yn, ad.const(regions)], axis=1)
        per = ad.bce_with_logits(model.logits_from_tokens(P, tokens, texts), target)
        losses = per.value.copy()
        if first is None:
            first = losses.copy()
        else:
            rising = np.where(losses > prev, rising + 1, 0)
            aborted |= active & (rising >= 5)
        prev = losses
        active &= ~aborted & (losses > config.vector_target_loss)
        if not active.any():
            break
        (g,) = ad.backprop(ad.sum_(per), [yn])
        step = config.vector_lr * g * active[:, None, None]
        y = np.maximum(y - step, 0.0)
    return y[:, 0, :], first, prev, aborted


def region_feature_loss(P, vectors: np.ndarray):
    """Step 2 loss: per image, ``sum_i ||f(x)_i - y'||_2`` over the selected regions."""
    def loss(x: ad.Node) -> ad.Node:
        feats = det.extract_region_features(P, x)[1]
        target = ad.const(np.broadcast_to(vectors[:, None, :], feats.shape))
        return ad.sum_(ad.l2norm(feats - target, axis=-1), axis=1)
    return loss


def region_two_step_images(model: MultimodalModel, images: np.ndarray, texts: list[str],
                           labels: np.ndarray, config: AttackConfig):
    """Returns (adversarial images, aborted mask)."""
    if model.detector is None:
        raise AttackConfigError("two-step attack needs a region-feature model")
    vectors, _, _, aborted = adversarial_region_vector(model, images, texts, labels, config)
    adv = pgd(region_feature_loss(model.detector.nodes(), vectors), images,
              config.with_(loss="feature-vector-l2"))
    return adv, aborted


def surrogate_images(surrogate: MultimodalModel, images, texts, labels, config: AttackConfig):
    """Full-access-style attack against a model the attacker trained themselves."""
    if surrogate.extractor == "grid":
        return full_access_images(surrogate, images, texts, labels, config), np.zeros(len(images), bool)
    return region_two_step_images(surrogate, images, texts, labels, config)


def check_transfer_pair(surrogate: MultimodalModel, target: MultimodalModel):
    if (surrogate.extractor, surrogate.fusion, surrogate.seed) == (target.extractor, target.fusion, target.seed):
        raise AttackConfigError("surrogate identical to target: that is full access, not transfer")


# ---------------------------------------------------------------- feature extractor access

def feature_match_images(detector: det.Detector, images: np.ndarray, target_images: np.ndarray,
                         config: AttackConfig) -> np.ndarray:
    """Pull the public detector's backbone map of each image toward that of
    its confounder. No multimodal model is involved."""
    D = detector.nodes()
    z = det.backbone(D, ad.const(target_images)).value
    return pgd(feature_map_distance(lambda x: det.backbone(D, x), z), images,
               config.with_(loss="feature-map-l2"))


def backbone_distance(detector: det.Detector, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    D = detector.nodes()
    fa = det.backbone(D, ad.const(a)).value
    fb = det.backbone(D, ad.const(b)).value
    return np.sqrt(((fa - fb) ** 2).reshape(len(a), -1).sum(axis=1))


# ---------------------------------------------------------------- no access

def ensemble_loss(models: Sequence[PublicModel], images: np.ndarray, mode: str,
                  target_images: np.ndarray | None = None):
    """Average over public models of the per-model feature-map loss."""
    if mode not in ("targeted", "untargeted"):
        raise AttackConfigError(f"unknown ensemble mode {mode!r}")
    if mode == "targeted" and target_images is None:
        raise AttackConfigError("targeted ensemble attack needs target images")
    terms = []
    for m in models:
        P = m.nodes()
        ref = target_images if mode == "targeted" else images
        z = pub.feature_map(P, ad.const(ref)).value
        terms.append(feature_map_distance(lambda x, P=P: pub.feature_map(P, x), z,
                                          negative=(mode == "untargeted")))
    n = len(terms)

    def loss(x: ad.Node) -> ad.Node:
        total = terms[0](x)
        for t in terms[1:]:
            total = total + t(x)
        return total * (1.0 / n)

    return loss


def ensemble_images(models: Sequence[PublicModel], images: np.ndarray, mode: str,
                    config: AttackConfig, target_images: np.ndarray | None = None,
                    init: np.ndarray | None = None) -> np.ndarray:
    """Ensemble PGD. The untargeted loss has zero gradient at the clean image,
    so callers pass a random ``init`` inside the ball."""
    if not models:
        raise AttackConfigError("ensemble needs at least one public model")
    kind = "feature-map-l2" if mode == "targeted" else "negative-feature-map-l2"
    return pgd(ensemble_loss(models, images, mode, target_images), images,
               config.with_(loss=kind), init=init)


def random_start(image_shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-epsilon, epsilon, size=image_shape)


def gaussian_noise(shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Unclipped zero-mean noise with std epsilon/2."""
    return rng.normal(0.0, epsilon / 2.0, size=shape)


def gaussian_image(image: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise clipped to the budget, then the image clipped to the pixel range."""
    noise = np.clip(gaussian_noise(image.shape, epsilon, rng), -epsilon, epsilon)
    return np.clip(image + noise, 0.0, 1.0)


# ---------------------------------------------------------------- per-meme wrappers

def _result(target: MultimodalModel, meme: synth.Meme, adv: np.ndarray, started: float,
            aborted: bool = False, note: str = "") -> AttackResult:
    clean, advp = target.predict(np.stack([meme.image, adv]), [meme.text, meme.text])
    return AttackResult(meme.id, clean, advp,
                        success=bool(not aborted and clean.label == meme.label and advp.label != meme.label),
                        linf=float(np.abs(adv - meme.image).max()),
                        wall_time=time.perf_counter() - started, label=meme.label,
                        aborted=aborted, note=note)


def full_access_attack(model: MultimodalModel, meme: synth.Meme,
                       config: AttackConfig = AttackConfig()) -> AttackResult:
    t = time.perf_counter()
    adv = full_access_images(model, meme.image[None], [meme.text], np.array([meme.label]), config)[0]
    return _result(model, meme, adv, t)


def region_two_step_attack(model: MultimodalModel, meme: synth.Meme,
                           config: AttackConfig = AttackConfig()) -> AttackResult:
    t = time.perf_counter()
    adv, aborted = region_two_step_images(model, meme.image[None], [meme.text],
                                          np.array([meme.label]), config)
    return _result(model, meme, adv[0], t, bool(aborted[0]))


def transfer_attack(surrogate: MultimodalModel, target: MultimodalModel, meme: synth.Meme,
                    config: AttackConfig = AttackConfig(threat="dataset-access")) -> AttackResult:
    check_transfer_pair(surrogate, target)
    t = time.perf_counter()
    adv, aborted = surrogate_images(surrogate, meme.image[None], [meme.text],
                                    np.array([meme.label]), config)
    return _result(target, meme, adv[0], t, bool(aborted[0]))


def feature_match_attack(detector: det.Detector, meme: synth.Meme, target: synth.Meme | None,
                         config: AttackConfig = AttackConfig(threat="feature-extractor-access")):
    """Returns the adversarial image, or None when the meme has no confounder.

    Success is judged separately against each region-feature target model
    (see :func:`evaluate_images`); this function never sees one.
    """
    if target is None:
        return None
    return feature_match_images(detector, meme.image[None], target.image[None], config)[0]


def ensemble_attack(models: Sequence[PublicModel], meme: synth.Meme, mode: str,
                    config: AttackConfig = AttackConfig(threat="no-access-savvy"),
                    target: synth.Meme | None = None, rng: np.random.Generator | None = None):
    """Returns the adversarial image, or None when targeted mode lacks a confounder."""
    if mode == "targeted":
        if target is None:
            return None
        return ensemble_images(models, meme.image[None], mode, config, target.image[None])[0]
    rng = rng if rng is not None else np.random.default_rng(0)
    init = meme.image + random_start(meme.image.shape, config.epsilon, rng)
    return ensemble_images(models, meme.image[None], mode, config, init=init[None])[0]


def gaussian_baseline(meme: synth.Meme, epsilon: float, seed: int) -> np.ndarray:
    return gaussian_image(meme.image, epsilon, np.random.default_rng(seed))


def evaluate_images(target: MultimodalModel, memes: list[synth.Meme], adv: np.ndarray,
                    epsilon: float, aborted: np.ndarray | None = None) -> list[AttackResult]:
    """Score stacked adversarial images against ``target``; asserts the budget."""
    clean_imgs = np.stack([m.image for m in memes])
    check_budget(adv, clean_imgs, epsilon)
    texts = [m.text for m in memes]
    clean = target.predict(clean_imgs, texts)
    advp = target.predict(adv, texts)
    dist = linf(adv, clean_imgs)
    aborted = np.zeros(len(memes), bool) if aborted is None else aborted
    return [AttackResult(m.id, c, a, bool(not ab and c.label == m.label and a.label != m.label),
                         float(d), label=m.label, aborted=bool(ab))
            for m, c, a, d, ab in zip(memes, clean, advp, dist, aborted)]
