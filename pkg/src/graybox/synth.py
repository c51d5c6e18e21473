"""Synthetic memes whose label is an interaction of image and text.

Each meme has a visual concept (a coloured glyph) and a text concept (a
keyword in a template sentence). The meme is positive exactly when the two
concepts match, so neither modality predicts the label on its own.
"""
from __future__ import annotations

import base64
import colorsys
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding

N_VISUAL = 8
N_TEXT = 8
HEIGHT = WIDTH = 32
CHANNELS = 3
CELL = 4  # pixels per detector grid cell (32 / 8)
# the glyph is added on top of the background at this amplitude; kept within
# a few attack budgets so a 0.1 perturbation can move concept evidence
GLYPH_AMPLITUDE = 0.3
# background texture: per-image tint, 4x4 coarse blotches, per-pixel grain
BACKGROUND_TINT = 0.02
BACKGROUND_COARSE_STD = 0.02
BACKGROUND_FINE_STD = 0.025

FORMAT = "graybox-memes"
FORMAT_VERSION = 1

KEYWORDS = [
    ["apple", "melon", "cherry"],
    ["river", "ocean", "lagoon"],
    ["falcon", "sparrow", "heron"],
    ["hammer", "wrench", "chisel"],
    ["violin", "trumpet", "banjo"],
    ["tiger", "panther", "jaguar"],
    ["rocket", "glider", "balloon"],
    ["castle", "tower", "fortress"],
]

TEMPLATES = [
    "look at this {} right here",
    "nobody expected the {} today",
    "when the {} shows up again",
    "my neighbor just bought a {}",
    "this is what a {} looks like",
    "they said the {} was gone",
    "i cannot believe that {}",
    "every morning there is a {}",
]

_KEYWORD_CONCEPT = {kw: c for c, kws in enumerate(KEYWORDS) for kw in kws}


@dataclass(frozen=True)
class ConceptPair:
    visual_concept: int
    text_concept: int

    def __post_init__(self):
        if not (0 <= self.visual_concept < N_VISUAL and 0 <= self.text_concept < N_TEXT):
            raise ValueError(f"concept out of range: {self}")


@dataclass(frozen=True)
class Glyph:
    concept: int
    center: tuple[float, float]  # (row, col) in pixels
    radius: float

    @property
    def cell(self) -> int:
        """Row-major index of the detector cell holding the glyph centre."""
        g = HEIGHT // CELL
        return int(self.center[0] // CELL) * g + int(self.center[1] // CELL)


@dataclass
class Meme:
    id: str
    image: np.ndarray
    text: str
    label: int
    split: str
    confounder_id: str | None = None
    visual_concept: int | None = None
    text_concept: int | None = None


@dataclass
class Dataset:
    memes: list[Meme]
    seed: int
    counts: dict = field(default_factory=dict)
    n_confounder_pairs: int = 0

    def split(self, name: str) -> list[Meme]:
        return [m for m in self.memes if m.split == name]

    def by_id(self) -> dict[str, Meme]:
        return {m.id: m for m in self.memes}


# ---------------------------------------------------------------- images

def _shape_mask(concept: int, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    ay, ax = np.abs(dy), np.abs(dx)
    d = np.hypot(dy, dx)
    if concept == 0:
        return d <= r
    if concept == 1:
        return np.maximum(ay, ax) <= 0.85 * r
    if concept == 2:
        return (dy >= -r) & (dy <= r) & (ax <= (dy + r) / 2)
    if concept == 3:
        return ay + ax <= r
    if concept == 4:
        return ((ax <= r / 3) & (ay <= r)) | ((ay <= r / 3) & (ax <= r))
    if concept == 5:
        return (d <= r) & (d >= 0.55 * r)
    if concept == 6:
        return (ay <= 0.4 * r) & (ax <= r)
    return ((np.abs(dx - dy) <= r / 3) | (np.abs(dx + dy) <= r / 3)) & (np.maximum(ay, ax) <= r)


def render_scene(visual_concept: int, style_seed: int) -> tuple[np.ndarray, Glyph]:
    """Render one glyph over a textured background.

    All random draws happen before the concept is consulted, so two scenes
    with the same ``style_seed`` share background, position and size.
    """
    if not 0 <= visual_concept < N_VISUAL:
        raise ValueError(f"visual concept {visual_concept} out of range")
    rng = np.random.default_rng(style_seed)
    base = rng.uniform(0.12, 0.32)
    tint = rng.uniform(-BACKGROUND_TINT, BACKGROUND_TINT, size=3)
    coarse = rng.normal(0.0, BACKGROUND_COARSE_STD, size=(4, 4, 1))
    fine = rng.normal(0.0, BACKGROUND_FINE_STD, size=(HEIGHT, WIDTH, CHANNELS))
    cy, cx = rng.uniform(8.0, 24.0, size=2)
    radius = rng.uniform(5.0, 7.0)
    hue_jitter = rng.uniform(-0.02, 0.02)
    shade = rng.uniform(0.85, 1.0, size=(HEIGHT, WIDTH, 1))

    img = base + tint + np.kron(coarse, np.ones((HEIGHT // 4, WIDTH // 4, 1))) + fine
    ys, xs = np.mgrid[0:HEIGHT, 0:WIDTH] + 0.5
    mask = _shape_mask(visual_concept, ys - cy, xs - cx, radius)
    hue = (visual_concept / N_VISUAL + hue_jitter) % 1.0
    color = np.array(colorsys.hsv_to_rgb(hue, 0.9, 1.0))
    img = img + mask[..., None] * (GLYPH_AMPLITUDE * color * shade)
    return np.clip(img, 0.0, 1.0), Glyph(visual_concept, (cy, cx), radius)


def render_image(visual_concept: int, style_seed: int) -> np.ndarray:
    return render_scene(visual_concept, style_seed)[0]


# ---------------------------------------------------------------- text

def render_text(text_concept: int, seed: int) -> str:
    if not 0 <= text_concept < N_TEXT:
        raise ValueError(f"text concept {text_concept} out of range")
    rng = np.random.default_rng(seed)
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    keyword = KEYWORDS[text_concept][rng.integers(len(KEYWORDS[text_concept]))]
    return template.format(keyword)


def text_concept_of(text: str) -> int | None:
    """Recover the concept from an unmodified sentence by keyword lookup."""
    for word in text.split():
        if word in _KEYWORD_CONCEPT:
            return _KEYWORD_CONCEPT[word]
    return None


def label_rule(visual_concept: int, text_concept: int) -> int:
    ConceptPair(visual_concept, text_concept)
    return int(visual_concept == text_concept)


# ---------------------------------------------------------------- datasets

def _sample_pair(rng: np.random.Generator, label: int) -> ConceptPair:
    v = int(rng.integers(N_VISUAL))
    if label:
        return ConceptPair(v, v)
    t = int(rng.integers(N_TEXT - 1))
    return ConceptPair(v, t if t < v else t + 1)


def _make_meme(seed, split, index, label, mid):
    rng = seeding.rng(seed, "meme", split, index)
    pair = _sample_pair(rng, label)
    style = seeding.derive(seed, "style", split, index)
    text_seed = seeding.derive(seed, "text", split, index)
    img = render_image(pair.visual_concept, style)
    meme = Meme(mid, _quantize(img), render_text(pair.text_concept, text_seed), label, split,
                None, pair.visual_concept, pair.text_concept)
    return meme, style, rng


def _quantize(img: np.ndarray) -> np.ndarray:
    # images live as float32 on disk; keep memory identical to the file
    return img.astype(np.float32).astype(np.float64)


def generate_dataset(seed: int, n_train: int = 2000, n_test: int = 500,
                     confounder_fraction: float = 0.5) -> Dataset:
    """Balanced train/test memes; ``confounder_fraction`` of test memes are
    members of confounder pairs (same text and background, flipped label)."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    if not 0.0 <= confounder_fraction <= 1.0:
        raise ValueError("confounder_fraction must lie in [0, 1]")
    memes = []
    for i in range(n_train):
        meme, _, _ = _make_meme(seed, "train", i, i % 2, f"train-{i:05d}")
        memes.append(meme)

    n_pairs = int(round(confounder_fraction * n_test / 2))
    n_single = n_test - 2 * n_pairs
    k = 0
    for j in range(n_pairs):
        a, style, rng = _make_meme(seed, "test", k, j % 2, f"test-{k:05d}")
        t = a.text_concept
        if a.label:
            alt = int(rng.integers(N_VISUAL - 1))
            v2 = alt if alt < t else alt + 1
        else:
            v2 = t
        b = Meme(f"test-{k + 1:05d}", _quantize(render_image(v2, style)), a.text,
                 label_rule(v2, t), "test", a.id, v2, t)
        a.confounder_id = b.id
        memes += [a, b]
        k += 2
    for j in range(n_single):
        meme, _, _ = _make_meme(seed, "test", k, j % 2, f"test-{k:05d}")
        memes.append(meme)
        k += 1
    return Dataset(memes, seed, {"train": n_train, "test": n_test}, n_pairs)


def generic_scenes(seed: int, n: int, tag: str = "generic") -> tuple[np.ndarray, list[Glyph]]:
    """Single-glyph images for the public pretraining tasks (no meme labels)."""
    images, glyphs = [], []
    for i in range(n):
        concept = int(seeding.rng(seed, tag, "concept", i).integers(N_VISUAL))
        img, g = render_scene(concept, seeding.derive(seed, tag, "style", i))
        images.append(img)
        glyphs.append(g)
    return np.stack(images), glyphs


# ---------------------------------------------------------------- file format

def _encode_image(img: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode("ascii")


def _decode_image(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).astype(np.float64)


def dumps_dataset(ds: Dataset) -> bytes:
    header = {
        "format": FORMAT, "version": FORMAT_VERSION, "seed": ds.seed,
        "height": HEIGHT, "width": WIDTH, "channels": CHANNELS,
        "counts": ds.counts, "n_confounder_pairs": ds.n_confounder_pairs,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for m in ds.memes:
        lines.append(json.dumps({
            "id": m.id, "split": m.split, "label": m.label, "text": m.text,
            "confounder_id": m.confounder_id, "image": _encode_image(m.image),
            "visual_concept": m.visual_concept, "text_concept": m.text_concept,
        }, sort_keys=True, ensure_ascii=False))
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_dataset(ds: Dataset, path) -> str:
    data = dumps_dataset(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not a meme dataset file")
        shape = (header["height"], header["width"], header["channels"])
        memes = []
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            memes.append(Meme(r["id"], _decode_image(r["image"], shape), r["text"], int(r["label"]),
                              r["split"], r["confounder_id"], r.get("visual_concept"),
                              r.get("text_concept")))
    return Dataset(memes, header["seed"], header["counts"], header["n_confounder_pairs"])
