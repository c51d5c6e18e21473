"""Character-level text attacks.

Six single-edit augmentations, a length-normalized edit-distance budget,
a guided beam search that ranks candidates with some multimodal model, and
random-search baselines at three budget levels.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Callable, Sequence

import numpy as np
from rapidfuzz.distance import Levenshtein

from . import autodiff as ad
from . import seeding, synth
from .zoo import MultimodalModel, Prediction
from .zoo.classifier import BATCH

KINDS = ("emoji-insert", "fun-fonts-substitute", "random-letter-replace",
         "random-unicode-replace", "typo-insert", "word-split")
SUBSTITUTION_KINDS = ("fun-fonts-substitute", "random-letter-replace", "random-unicode-replace")
LEVELS = ("light", "medium", "heavy")
LIGHT_TAU = 0.07
MEDIUM_TAU = 0.2
HEAVY_TAU = 0.5

INAPPLICABLE = None  # returned by apply_augmentation when a kind has no valid position

_ASCII_LETTERS = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")
# Latin-1 letters, Greek and Cyrillic: visually plausible look-alike replacements
_UNICODE_POOL = tuple(
    [chr(c) for c in range(0x00C0, 0x0100) if c not in (0x00D7, 0x00F7)]
    + [chr(c) for c in range(0x0391, 0x03CA) if c != 0x03A2]
    + [chr(c) for c in range(0x0410, 0x0450)]
)


def _read_table(name: str) -> list[list[str]]:
    text = resources.files("graybox").joinpath("data").joinpath(name).read_text(encoding="utf-8")
    return [line.split("\t") for line in text.splitlines() if line and not line.startswith("#")]


EMOJI = tuple(row[1] for row in _read_table("emoji.txt"))
FUN_FONTS = {row[0]: row[2] for row in _read_table("fun_fonts.tsv")}


# ---------------------------------------------------------------- augmentations

def _letter_positions(s: str) -> list[int]:
    return [i for i, c in enumerate(s) if c in _ASCII_LETTERS]


def apply_augmentation(s: str, kind: str, rng) -> str | None:
    """Apply one minimal edit of ``kind`` at a random valid position.

    Returns :data:`INAPPLICABLE` when the string offers no valid position.
    """
    if kind == "emoji-insert":
        i = int(rng.choice(len(s) + 1))
        return s[:i] + EMOJI[int(rng.choice(len(EMOJI)))] + s[i:]
    if kind == "fun-fonts-substitute":
        pos = [i for i in _letter_positions(s) if s[i] in FUN_FONTS]
        if not pos:
            return INAPPLICABLE
        i = int(rng.choice(pos))
        return s[:i] + FUN_FONTS[s[i]] + s[i + 1:]
    if kind == "random-letter-replace":
        pos = _letter_positions(s)
        if not pos:
            return INAPPLICABLE
        i = int(rng.choice(pos))
        letters = sorted(_ASCII_LETTERS - {s[i]})
        return s[:i] + letters[int(rng.choice(len(letters)))] + s[i + 1:]
    if kind == "random-unicode-replace":
        pos = [i for i, c in enumerate(s) if not c.isspace()]
        if not pos:
            return INAPPLICABLE
        i = int(rng.choice(pos))
        c = _UNICODE_POOL[int(rng.choice(len(_UNICODE_POOL)))]
        if c == s[i]:
            c = _UNICODE_POOL[(_UNICODE_POOL.index(c) + 1) % len(_UNICODE_POOL)]
        return s[:i] + c + s[i + 1:]
    if kind == "typo-insert":
        swaps = [i for i in range(len(s) - 1)
                 if s[i] in _ASCII_LETTERS and s[i + 1] in _ASCII_LETTERS and s[i] != s[i + 1]]
        dups = _letter_positions(s)
        options = [("swap", i) for i in swaps] + [("dup", i) for i in dups]
        if not options:
            return INAPPLICABLE
        how, i = options[int(rng.choice(len(options)))]
        if how == "swap":
            return s[:i] + s[i + 1] + s[i] + s[i + 2:]
        return s[:i + 1] + s[i] + s[i + 1:]
    if kind == "word-split":
        pos = [i for i in range(1, len(s)) if not s[i - 1].isspace() and not s[i].isspace()]
        if not pos:
            return INAPPLICABLE
        i = int(rng.choice(pos))
        return s[:i] + " " + s[i:]
    raise ValueError(f"unknown augmentation kind {kind!r}")


def random_edit(s: str, rng, kinds: Sequence[str] = KINDS) -> str | None:
    """One augmentation of a random kind, trying the other kinds if inapplicable."""
    for j in rng.permutation(len(kinds)):
        out = apply_augmentation(s, kinds[int(j)], rng)
        if out is not INAPPLICABLE:
            return out
    return INAPPLICABLE


def normalized_edit_distance(a: str, b: str) -> float:
    """Levenshtein distance over code points, divided by the original's length."""
    return Levenshtein.distance(a, b) / max(1, len(a))


# ---------------------------------------------------------------- guided search

@dataclass(frozen=True)
class TextAttackConfig:
    tau: float = LIGHT_TAU
    beam_width: int = 5
    branch: int = 8
    max_iterations: int = 30
    seed: int = 0
    kinds: tuple[str, ...] = KINDS

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if min(self.beam_width, self.branch, self.max_iterations) < 1:
            raise ValueError("beam width, branch factor and iterations must be >= 1")
        unknown = set(self.kinds) - set(KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"bad augmentation kinds {sorted(unknown)}")


@dataclass
class SearchOutcome:
    text: str
    score: float      # correct-class probability under the ranker
    queries: int
    flipped: bool     # ranker's label flipped


def beam_search(score_fn: Callable[[list[str]], np.ndarray], original: str,
                config: TextAttackConfig, rng) -> SearchOutcome:
    """Beam search minimizing ``score_fn`` (correct-class probability).

    ``score_fn`` maps a list of strings to scores; a score below 0.5 means
    the ranker's label has flipped, which ends the search at once. The
    original is scored first, so a meme that is already misclassified (for
    example because its image was attacked) keeps its text.
    """
    beam = [original]
    best, best_score = original, float(np.asarray(score_fn([original]), dtype=float)[0])
    seen: dict[str, float] = {original: best_score}
    queries = 1
    if best_score < 0.5:
        return SearchOutcome(best, best_score, queries, True)
    for _ in range(config.max_iterations):
        survivors: list[str] = []
        for attempt in range(2):  # one re-sample if everything was discarded
            for parent in beam:
                for _ in range(config.branch):
                    cand = random_edit(parent, rng, config.kinds)
                    if cand is not INAPPLICABLE and normalized_edit_distance(original, cand) <= config.tau:
                        survivors.append(cand)
            if survivors:
                break
        if not survivors:
            break
        fresh = [c for c in dict.fromkeys(survivors) if c not in seen]
        if fresh:
            scores = np.asarray(score_fn(fresh), dtype=float)
            queries += len(fresh)
            seen.update(zip(fresh, scores.tolist()))
        ranked = sorted(dict.fromkeys(survivors), key=lambda c: seen[c])
        if seen[ranked[0]] < best_score:
            best, best_score = ranked[0], seen[ranked[0]]
        if best_score < 0.5:
            return SearchOutcome(best, best_score, queries, True)
        beam = ranked[:config.beam_width]
    return SearchOutcome(best, float(best_score), queries, False)


def correct_class_scorer(model: MultimodalModel, image: np.ndarray, label: int):
    """Score function for texts paired with a fixed image."""
    P = model.nodes()
    tokens = model.image_tokens(P, ad.const(np.asarray(image, dtype=float)[None])).value

    def score(texts: list[str]) -> np.ndarray:
        out = []
        for s in range(0, len(texts), BATCH):
            chunk = texts[s:s + BATCH]
            tok = ad.const(np.broadcast_to(tokens, (len(chunk),) + tokens.shape[1:]).copy())
            z = model.logits_from_tokens(P, tok, chunk).value
            out.append(0.5 * (1.0 + np.tanh(0.5 * z)))
        p = np.concatenate(out)
        return p if label == 1 else 1.0 - p

    return score


@dataclass
class TextAttackResult:
    meme_id: str
    original: str
    augmented: str
    distance: float
    queries: int
    success: bool
    label: int
    clean_prediction: Prediction
    adversarial_prediction: Prediction
    note: str = ""


def _judge(target: MultimodalModel, meme: synth.Meme, augmented: str, queries: int,
           note: str = "") -> TextAttackResult:
    clean, adv = target.predict(np.stack([meme.image, meme.image]), [meme.text, augmented])
    return TextAttackResult(
        meme.id, meme.text, augmented, normalized_edit_distance(meme.text, augmented), queries,
        success=bool(clean.label == meme.label and adv.label != meme.label),
        label=meme.label, clean_prediction=clean, adversarial_prediction=adv, note=note)


def guided_attack(ranker: MultimodalModel, target: MultimodalModel, meme: synth.Meme,
                  config: TextAttackConfig = TextAttackConfig()) -> TextAttackResult:
    """Beam search ranked by ``ranker``; success is judged on ``target``.

    With ``ranker is target`` this is the full-access attack; a surrogate
    ranker gives the dataset-access variant.
    """
    out = guided_text(ranker, meme, config)
    return _judge(target, meme, out.text, out.queries)


def guided_text(ranker: MultimodalModel, meme: synth.Meme, config: TextAttackConfig,
                image: np.ndarray | None = None) -> SearchOutcome:
    """The ranker's beam search for one meme, with the text paired with
    ``image`` (the clean image by default, an adversarial one when the two
    modalities are attacked together)."""
    stream = "guided" if image is None else "guided-after-image"
    rng = seeding.rng(config.seed, stream, ranker.model_id, meme.id)
    score = correct_class_scorer(ranker, meme.image if image is None else image, meme.label)
    return beam_search(score, meme.text, config, rng)


# ---------------------------------------------------------------- random search

def random_augment(s: str, level: str, seed, key: str = "") -> str:
    """Random augmentation baseline.

    light: keep applying edits while the distance stays within 0.07.
    medium: fill the 0.2 budget, skipping edits that would overshoot, so
    outputs land in [0.1, 0.2] and average close to 0.2.
    heavy: apply ``len(s)`` edits with no cap.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    rng = seeding.rng(seed, "random-augment", level, key, s)
    if level == "heavy":
        out = s
        for _ in range(len(s)):
            nxt = random_edit(out, rng)
            out = out if nxt is INAPPLICABLE else nxt
        return out
    cap = LIGHT_TAU if level == "light" else MEDIUM_TAU
    out, misses, tries = s, 0, 0
    while misses < (1 if level == "light" else 8) and tries < 4 * len(s) + 8:
        tries += 1
        nxt = random_edit(out, rng)
        if nxt is not INAPPLICABLE and normalized_edit_distance(s, nxt) <= cap:
            out, misses = nxt, 0
        else:
            misses += 1
    return out


def random_attack(target: MultimodalModel, meme: synth.Meme, level: str, seed) -> TextAttackResult:
    return _judge(target, meme, random_augment(meme.text, level, seed, meme.id), 0, note=level)
