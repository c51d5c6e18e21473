"""Grid- and region-feature multimodal classifiers with late, mid or early fusion."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import seeding, synth, tensorio
from . import detector as det
from .layers import TrainingFailure, add_conv, add_linear, conv, fit, linear, nodes, standardize

EXTRACTORS = ("grid", "region")
FUSIONS = ("late", "mid", "early")

PAD, OOV = 0, 1
_ALPHABET = " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
CHAR_INDEX = {c: i + 2 for i, c in enumerate(_ALPHABET)}
VOCAB_SIZE = 2 + len(_ALPHABET)
MAX_TEXT_LEN = 192

EMB_DIM = 16
TEXT_DIM = 32
FUSE_DIM = 32
HIDDEN = 64
GRID_TOKENS = det.GRID * det.GRID
IMAGE_DIM = 16  # grid map channels == region feature size

ACCURACY_FLOOR = 0.75
BATCH = 100  # inference chunk; fixed so results never depend on caller batching


@dataclass(frozen=True)
class Prediction:
    logit: float
    probability: float
    label: int

    @classmethod
    def from_logit(cls, z: float) -> "Prediction":
        p = float(0.5 * (1.0 + np.tanh(0.5 * z)))
        return cls(float(z), p, int(p >= 0.5))


def encode_texts(texts: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Character indices (B, L) and validity mask; unknown characters map to OOV
    and an empty string becomes a single OOV token."""
    seqs = [[CHAR_INDEX.get(ch, OOV) for ch in t[:MAX_TEXT_LEN]] or [OOV] for t in texts]
    width = max(len(s) for s in seqs)
    idx = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        idx[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return idx, mask


def text_features(P, idx: np.ndarray, mask: np.ndarray) -> tuple[ad.Node, ad.Node]:
    """Character trigram features (B, L, 32) and their masked mean (B, 32)."""
    b, length = idx.shape
    emb = ad.embedding(P["text.emb"], idx)
    emb = emb * ad.const(np.broadcast_to(mask[..., None], emb.shape))
    y = ad.conv2d(ad.reshape(emb, (b, 1, length, EMB_DIM)), P["text.conv.w"], stride=1, pad=(0, 1))
    y = ad.relu(y + ad.broadcast_to(P["text.conv.b"], y.shape))
    feats = ad.reshape(y, (b, length, TEXT_DIM))
    weights = (mask / mask.sum(axis=1, keepdims=True))[:, None, :]
    pooled = ad.reshape(ad.matmul(ad.const(weights), feats), (b, TEXT_DIM))
    return feats, pooled


def grid_features(P, x: ad.Node) -> ad.Node:
    """End-to-end trained CNN: (B, 32, 32, 3) -> (B, 8, 8, 16)."""
    return conv(P, "cnn.conv2", conv(P, "cnn.conv1", standardize(x)))


def _fuse_late(P, img: ad.Node, pooled: ad.Node) -> ad.Node:
    a = linear(P, "late.img", ad.mean(img, axis=1))
    t = linear(P, "late.txt", pooled)
    h = ad.relu(linear(P, "late.fc", (a + t) * 0.5))
    return linear(P, "late.out", h)


def _fuse_mid(P, img: ad.Node, pooled: ad.Node) -> ad.Node:
    h = ad.relu(linear(P, "mid.fc", ad.concat([ad.mean(img, axis=1), pooled], axis=1)))
    return linear(P, "mid.out", h)


def _fuse_early(P, img: ad.Node, feats: ad.Node, mask: np.ndarray) -> ad.Node:
    b, n, _ = img.shape
    length = feats.shape[1]
    pos_i = ad.reshape(P["early.img_pos"][0:n], (1, n, FUSE_DIM))
    pos_t = ad.reshape(P["early.txt_pos"][0:length], (1, length, FUSE_DIM))
    cls = ad.broadcast_to(P["early.cls"], (b, 1, FUSE_DIM))
    it = linear(P, "early.img", img) + ad.broadcast_to(pos_i, (b, n, FUSE_DIM))
    tt = linear(P, "early.txt", feats) + ad.broadcast_to(pos_t, (b, length, FUSE_DIM))
    seq = ad.concat([cls, it, tt], axis=1)
    # the classification token is the only readout, so it is the only query
    q = linear(P, "early.q", cls)
    k = linear(P, "early.k", seq)
    v = linear(P, "early.v", seq)
    bias = np.concatenate([np.zeros((b, 1 + n)), np.where(mask > 0, 0.0, -1e9)], axis=1)[:, None, :]
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(FUSE_DIM)) + ad.const(bias)
    h = linear(P, "early.o", ad.matmul(ad.softmax(scores, axis=-1), v))
    c = ad.reshape(cls + h, (b, FUSE_DIM))
    c = c + linear(P, "early.ff2", ad.relu(linear(P, "early.ff1", c)))
    return linear(P, "early.out", c)


def init_classifier(extractor: str, fusion: str, seed: int) -> dict[str, np.ndarray]:
    if extractor not in EXTRACTORS or fusion not in FUSIONS:
        raise ValueError(f"unknown model kind {extractor}/{fusion}")
    p: dict[str, np.ndarray] = {}
    rng = seeding.rng(seed, "init", "text.emb")
    p["text.emb"] = rng.normal(0.0, 1.0, size=(VOCAB_SIZE, EMB_DIM))
    p["text.conv.w"] = seeding.rng(seed, "init", "text.conv").normal(
        0.0, np.sqrt(2.0 / (3 * EMB_DIM)), size=(1, 3, EMB_DIM, TEXT_DIM))
    p["text.conv.b"] = np.zeros(TEXT_DIM)
    if extractor == "grid":
        add_conv(p, seed, "cnn.conv1", 3, synth.CHANNELS, 8)
        add_conv(p, seed, "cnn.conv2", 3, 8, IMAGE_DIM)
    if fusion == "late":
        add_linear(p, seed, "late.img", IMAGE_DIM, FUSE_DIM)
        add_linear(p, seed, "late.txt", TEXT_DIM, FUSE_DIM)
        add_linear(p, seed, "late.fc", FUSE_DIM, HIDDEN)
        add_linear(p, seed, "late.out", HIDDEN, 1)
    elif fusion == "mid":
        add_linear(p, seed, "mid.fc", IMAGE_DIM + TEXT_DIM, HIDDEN)
        add_linear(p, seed, "mid.out", HIDDEN, 1)
    else:
        n_img = GRID_TOKENS if extractor == "grid" else det.N_REGIONS + 1
        rng = seeding.rng(seed, "init", "early.pos")
        p["early.cls"] = rng.normal(0.0, 0.1, size=(1, 1, FUSE_DIM))
        p["early.img_pos"] = rng.normal(0.0, 0.1, size=(n_img, FUSE_DIM))
        p["early.txt_pos"] = rng.normal(0.0, 0.1, size=(MAX_TEXT_LEN, FUSE_DIM))
        add_linear(p, seed, "early.img", IMAGE_DIM, FUSE_DIM)
        add_linear(p, seed, "early.txt", TEXT_DIM, FUSE_DIM)
        for name in ("q", "k", "v", "o"):
            add_linear(p, seed, f"early.{name}", FUSE_DIM, FUSE_DIM)
        add_linear(p, seed, "early.ff1", FUSE_DIM, HIDDEN)
        add_linear(p, seed, "early.ff2", HIDDEN, FUSE_DIM)
        add_linear(p, seed, "early.out", FUSE_DIM, 1)
    return p


@dataclass
class MultimodalModel:
    extractor: str
    fusion: str
    params: dict[str, np.ndarray]
    seed: int
    detector: det.Detector | None = None
    clean_accuracy: float | None = None
    train_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.extractor == "region") != (self.detector is not None):
            raise ValueError("region models need a detector and grid models must not hold one")

    @property
    def model_id(self) -> str:
        return f"{self.extractor}-{self.fusion}"

    def nodes(self) -> dict:
        P = nodes(self.params)
        if self.detector is not None:
            P.update(self.detector.nodes())
        return P

    # -- forward pieces
    def image_tokens(self, P, x: ad.Node) -> ad.Node:
        """(B, N, 16) image tokens: grid cells or the selected region features."""
        if self.extractor == "grid":
            fmap = grid_features(P, x)
            return ad.reshape(fmap, (fmap.shape[0], GRID_TOKENS, IMAGE_DIM))
        return det.extract_region_features(P, x)[1]

    def logits_from_tokens(self, P, tokens: ad.Node, texts: list[str]) -> ad.Node:
        idx, mask = encode_texts(texts)
        feats, pooled = text_features(P, idx, mask)
        if self.fusion == "late":
            out = _fuse_late(P, tokens, pooled)
        elif self.fusion == "mid":
            out = _fuse_mid(P, tokens, pooled)
        else:
            out = _fuse_early(P, tokens, feats, mask)
        return ad.reshape(out, (tokens.shape[0],))

    def logits(self, x, texts: list[str], P=None) -> ad.Node:
        P = self.nodes() if P is None else P
        x = x if isinstance(x, ad.Node) else ad.const(x)
        return self.logits_from_tokens(P, self.image_tokens(P, x), texts)

    def logit_values(self, images: np.ndarray, texts: list[str]) -> np.ndarray:
        P = self.nodes()
        out = [self.logits(images[s:s + BATCH], texts[s:s + BATCH], P).value
               for s in range(0, len(images), BATCH)]
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, images: np.ndarray, texts: list[str]) -> list[Prediction]:
        return [Prediction.from_logit(z) for z in self.logit_values(np.asarray(images), list(texts))]

    def classify(self, image: np.ndarray, text: str) -> Prediction:
        return self.predict(np.asarray(image)[None], [text])[0]

    # -- files
    def to_file(self, path, detector_file: str | None = None) -> str:
        tensors = {f"model/{k}": v for k, v in self.params.items()}
        meta = {
            "kind": "multimodal", "extractor": self.extractor, "fusion": self.fusion,
            "seed": self.seed, "clean_accuracy": self.clean_accuracy,
            "train_config": self.train_config,
        }
        if self.detector is not None:
            tensors.update({f"detector/{k}": v for k, v in self.detector.params.items()})
            meta["detector"] = {
                # file name only, so model bytes do not depend on the run directory
                "file": Path(detector_file).name if detector_file else None,
                "digest": tensorio.file_digest(detector_file) if detector_file else None,
                "seed": self.detector.seed, "heldout_accuracy": self.detector.heldout_accuracy,
            }
        return tensorio.save(path, tensors, meta)

    @classmethod
    def from_file(cls, path) -> "MultimodalModel":
        tensors, meta = tensorio.load(path)
        if meta.get("kind") != "multimodal":
            raise ValueError(f"{path}: not a multimodal model file")
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("model/")}
        detector = None
        if "detector" in meta:
            dp = {k[9:]: v for k, v in tensors.items() if k.startswith("detector/")}
            detector = det.Detector(dp, meta["detector"]["seed"], meta["detector"]["heldout_accuracy"])
        return cls(meta["extractor"], meta["fusion"], params, meta["seed"], detector,
                   meta["clean_accuracy"], meta.get("train_config", {}))


def clean_accuracy(model: MultimodalModel, memes: list[synth.Meme]) -> float:
    preds = model.predict(np.stack([m.image for m in memes]), [m.text for m in memes])
    return float(np.mean([p.label == m.label for p, m in zip(preds, memes)]))


def train_classifier(dataset: synth.Dataset, extractor: str, fusion: str, seed: int, *,
                     detector: det.Detector | None = None, epochs: int = 40,
                     batch_size: int = 50, lr: float = 3e-3,
                     floor: float = ACCURACY_FLOOR) -> MultimodalModel:
    """Fit with sigmoid BCE. Grid models train their CNN; the detector of a
    region model is a constant and never receives an update."""
    if extractor == "region" and detector is None:
        raise ValueError("region models need a pretrained detector")
    train = dataset.split("train")
    images = np.stack([m.image for m in train])
    texts = [m.text for m in train]
    labels = np.array([m.label for m in train], dtype=np.float64)
    params = init_classifier(extractor, fusion, seed)
    model = MultimodalModel(extractor, fusion, params, seed,
                            detector if extractor == "region" else None)
    config = {"epochs": epochs, "batch_size": batch_size, "lr": lr}
    model.train_config = config

    if extractor == "region":
        D = detector.nodes()
        regions = np.concatenate([
            det.extract_region_features(D, ad.const(images[s:s + BATCH]))[1].value
            for s in range(0, len(images), BATCH)])

        def tokens_for(P, idx):
            return ad.const(regions[idx])
    else:
        def tokens_for(P, idx):
            return model.image_tokens(P, ad.const(images[idx]))

    def loss_fn(P, idx):
        z = model.logits_from_tokens(P, tokens_for(P, idx), [texts[i] for i in idx])
        return ad.mean(ad.bce_with_logits(z, labels[idx]))

    fit(params, loss_fn, len(train), seed=seed, epochs=epochs, batch_size=batch_size, lr=lr)
    model.clean_accuracy = clean_accuracy(model, dataset.split("test"))
    if model.clean_accuracy < floor:
        raise TrainingFailure(
            f"{model.model_id} reached {model.clean_accuracy:.3f} clean test accuracy (< {floor})")
    return model
