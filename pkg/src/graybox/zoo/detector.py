"""A mini region detector: conv backbone, per-cell proposal scores and a
per-cell prediction head whose hidden layer is the region feature."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .. import synth, tensorio
from .layers import TrainingFailure, add_conv, add_linear, conv, fit, linear, nodes, standardize

GRID = synth.HEIGHT // synth.CELL
FMAP_CHANNELS = 16
REGION_DIM = 16
N_REGIONS = 4
ACCURACY_FLOOR = 0.60


@dataclass
class Detector:
    params: dict[str, np.ndarray]
    seed: int
    heldout_accuracy: float | None = None

    def nodes(self) -> dict:
        return nodes(self.params)

    def to_file(self, path) -> str:
        return tensorio.save(path, self.params, {
            "kind": "detector", "seed": self.seed, "heldout_accuracy": self.heldout_accuracy,
        })

    @classmethod
    def from_file(cls, path) -> "Detector":
        params, meta = tensorio.load(path)
        if meta.get("kind") != "detector":
            raise ValueError(f"{path}: not a detector file")
        return cls(params, meta["seed"], meta["heldout_accuracy"])


def init_detector(seed: int) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    add_conv(p, seed, "backbone.conv1", 3, synth.CHANNELS, 8)
    add_conv(p, seed, "backbone.conv2", 3, 8, FMAP_CHANNELS)
    add_linear(p, seed, "proposal", FMAP_CHANNELS, 1)
    add_linear(p, seed, "head.fc", FMAP_CHANNELS, REGION_DIM)
    add_linear(p, seed, "head.cls", REGION_DIM, synth.N_VISUAL)
    return p


def backbone(P, x: ad.Node) -> ad.Node:
    """(B, 32, 32, 3) image -> (B, 8, 8, 16) feature map."""
    return conv(P, "backbone.conv2", conv(P, "backbone.conv1", standardize(x)))


def cells_of(fmap: ad.Node) -> ad.Node:
    b = fmap.shape[0]
    return ad.reshape(fmap, (b, GRID * GRID, FMAP_CHANNELS))


def proposal_scores(P, cells: ad.Node) -> ad.Node:
    return ad.reshape(linear(P, "proposal", cells), cells.shape[:2])


def region_head(P, cells: ad.Node) -> ad.Node:
    h = ad.relu(linear(P, "head.fc", cells))
    return h * P["head.scale"] if "head.scale" in P else h


def top_cells(scores: np.ndarray, r: int = N_REGIONS) -> np.ndarray:
    """Indices of the ``r`` highest scores per row; ties keep the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :r]


def extract_region_features(P, x: ad.Node, r: int = N_REGIONS):
    """Return (feature map, (B, r, d) region features, (B, r) selected cells).

    Cell selection is a hard top-r on proposal scores and carries no gradient;
    the backbone and the per-cell head do.
    """
    fmap = backbone(P, x)
    cells = cells_of(fmap)
    idx = top_cells(proposal_scores(P, cells).value, r)
    return fmap, region_head(P, ad.gather_rows(cells, idx)), idx


def _cell_targets(glyphs: list[synth.Glyph]) -> tuple[np.ndarray, np.ndarray]:
    """Objectness targets and one-hot class targets per cell."""
    centers = (np.arange(GRID) + 0.5) * synth.CELL
    obj = np.zeros((len(glyphs), GRID * GRID))
    cls = np.zeros((len(glyphs), GRID * GRID, synth.N_VISUAL))
    for i, g in enumerate(glyphs):
        inside_r = np.abs(centers - g.center[0]) <= 0.7 * g.radius
        inside_c = np.abs(centers - g.center[1]) <= 0.7 * g.radius
        m = np.outer(inside_r, inside_c).reshape(-1)
        m[g.cell] = True
        obj[i, g.cell] = 1.0
        cls[i, m, g.concept] = 1.0
    return obj, cls


def heldout_accuracy(P, images: np.ndarray, glyphs: list[synth.Glyph]) -> float:
    """Object-class accuracy read at each glyph's centre cell."""
    hits = 0
    for start in range(0, len(images), 100):
        x = ad.const(images[start:start + 100])
        cells = cells_of(backbone(P, x))
        logits = linear(P, "head.cls", region_head(P, cells)).value
        for j, g in enumerate(glyphs[start:start + 100]):
            hits += int(np.argmax(logits[j, g.cell]) == g.concept)
    return hits / len(images)


def pretrain_detector(images: np.ndarray, glyphs: list[synth.Glyph], seed: int, *,
                      heldout: tuple[np.ndarray, list] | None = None, epochs: int = 16,
                      batch_size: int = 50, lr: float = 3e-3,
                      floor: float = ACCURACY_FLOOR) -> Detector:
    """Train on the public per-cell object task, then freeze."""
    params = init_detector(seed)
    obj_t, cls_t = _cell_targets(glyphs)

    def loss_fn(P, idx):
        cells = cells_of(backbone(P, ad.const(images[idx])))
        obj = ad.mean(ad.bce_with_logits(proposal_scores(P, cells), obj_t[idx]))
        logits = linear(P, "head.cls", region_head(P, cells))
        mask = np.broadcast_to(obj_t[idx][..., None], logits.shape)
        cls = ad.sum_(ad.bce_with_logits(logits, cls_t[idx]) * ad.const(mask)) / max(mask.sum() / synth.N_VISUAL, 1.0)
        return obj + cls

    fit(params, loss_fn, len(images), seed=seed, epochs=epochs, batch_size=batch_size, lr=lr)
    # fold a fixed output scale into the frozen head so region features have unit spread
    # (the class layer is rescaled to keep its logits unchanged)
    P = nodes(params)
    feats = np.concatenate([extract_region_features(P, ad.const(images[s:s + 100]))[1].value
                            for s in range(0, len(images), 100)])
    scale = 1.0 / max(float(feats.std()), 1e-6)
    params["head.scale"] = np.array(scale)
    params["head.cls.w"] = params["head.cls.w"] / scale
    ev_images, ev_glyphs = heldout if heldout is not None else (images, glyphs)
    acc = heldout_accuracy(nodes(params), ev_images, ev_glyphs)
    if acc < floor:
        raise TrainingFailure(f"detector reached {acc:.3f} held-out accuracy (< {floor})")
    return Detector(params, seed, acc)
