"""Flip-rate evaluation and the (model x threat x modality) experiment matrix.

The matrix is computed in two phases. First every adversarial input that
does not depend on the target is generated once ("sources": PGD images per
attacker model, feature-match, ensemble and Gaussian images, guided and
random texts). Then each cell assembles its per-meme inputs from sources
and classifies them with the target. Sources are computed in fixed-size
chunks of memes, so serial and parallel runs do identical arithmetic.
"""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import image_attacks as ia
from . import seeding, synth
from . import text_attacks as ta
from .zoo import MultimodalModel, PublicModel
from .zoo import detector as det

THREATS = ia.THREATS
TEXT_THREATS = ("full-access", "dataset-access", "no-access-savvy", "no-access-naive")
MODALITIES = ("image", "text", "combined")
CSV_COLUMNS = ("model_id", "extractor", "fusion", "threat", "modality", "n_eval",
               "n_correct_clean", "n_flipped", "flip_rate", "note")
TOLERANCE = 0.02
GAUSSIAN_CEILING = 0.15
CHUNK = 50
NOT_APPLICABLE = "not-applicable"
PAIRED_NOTE = "confounder-paired memes only"


class HarnessConfigError(ValueError):
    pass


# ---------------------------------------------------------------- flip rate

@dataclass(frozen=True)
class MemeOutcome:
    """One row of the raw prediction log."""
    meme_id: str
    label: int
    clean_label: int
    adversarial_label: int
    aborted: bool = False


@dataclass(frozen=True)
class FlipRateReport:
    model_id: str
    extractor: str
    fusion: str
    threat: str
    modality: str
    n_eval: int
    n_correct_clean: int
    n_flipped: int
    flip_rate: float | None  # None when no meme was originally correct
    note: str = ""

    def __post_init__(self):
        if not 0 <= self.n_flipped <= self.n_correct_clean <= self.n_eval:
            raise ValueError("inconsistent flip-rate counts")

    @property
    def undefined(self) -> bool:
        return self.flip_rate is None

    def csv_row(self) -> dict:
        row = asdict(self)
        row["flip_rate"] = "undefined" if self.flip_rate is None else f"{self.flip_rate:.6f}"
        return row


def report_from_log(outcomes: Sequence[MemeOutcome], model_id: str, extractor: str, fusion: str,
                    threat: str, modality: str, note: str = "") -> FlipRateReport:
    """Count flips over originally-correct memes; aborted memes are excluded."""
    kept = [o for o in outcomes if not o.aborted]
    n_aborted = len(outcomes) - len(kept)
    correct = [o for o in kept if o.clean_label == o.label]
    flipped = sum(o.adversarial_label != o.label for o in correct)
    notes = [note] if note else []
    if n_aborted:
        notes.append(f"{n_aborted} aborted memes excluded")
    if not correct:
        notes.append("undefined: no originally-correct memes")
    rate = flipped / len(correct) if correct else None
    return FlipRateReport(model_id, extractor, fusion, threat, modality, len(kept), len(correct),
                          flipped, rate, "; ".join(notes))


def prediction_log(model: MultimodalModel, clean: Sequence[synth.Meme],
                   adversarial: Sequence[synth.Meme],
                   aborted: Sequence[bool] | None = None) -> list[MemeOutcome]:
    if [m.id for m in clean] != [m.id for m in adversarial]:
        raise HarnessConfigError("clean and adversarial memes are not aligned by id")
    if not clean:
        return []
    c = model.predict(np.stack([m.image for m in clean]), [m.text for m in clean])
    a = model.predict(np.stack([m.image for m in adversarial]), [m.text for m in adversarial])
    aborted = [False] * len(clean) if aborted is None else list(aborted)
    return [MemeOutcome(m.id, m.label, pc.label, pa.label, bool(ab))
            for m, pc, pa, ab in zip(clean, c, a, aborted)]


def flip_rate(model: MultimodalModel, clean: Sequence[synth.Meme],
              adversarial: Sequence[synth.Meme], threat: str = "full-access",
              modality: str = "image", note: str = "",
              aborted: Sequence[bool] | None = None) -> FlipRateReport:
    log = prediction_log(model, clean, adversarial, aborted)
    return report_from_log(log, model.model_id, model.extractor, model.fusion, threat, modality, note)


# ---------------------------------------------------------------- combining

@dataclass(frozen=True)
class AdversarialImage:
    meme_id: str
    threat: str
    image: np.ndarray


@dataclass(frozen=True)
class AdversarialText:
    meme_id: str
    threat: str
    text: str


def combine_attacks(meme: synth.Meme, image_out: AdversarialImage,
                    text_out: AdversarialText) -> synth.Meme:
    """The meme with both adversarial parts; label unchanged."""
    if not (image_out.meme_id == text_out.meme_id == meme.id):
        raise HarnessConfigError("image and text attacks come from different memes")
    if image_out.threat != text_out.threat:
        raise HarnessConfigError(f"threat mismatch: {image_out.threat} vs {text_out.threat}")
    if image_out.threat == "feature-extractor-access":
        raise HarnessConfigError("feature-extractor access has no text counterpart")
    return replace(meme, image=np.asarray(image_out.image, dtype=np.float64), text=text_out.text)


# ---------------------------------------------------------------- matrix config

@dataclass(frozen=True)
class MatrixConfig:
    seed: int = 0
    attack: ia.AttackConfig = field(default_factory=ia.AttackConfig)
    text: ta.TextAttackConfig = field(default_factory=ta.TextAttackConfig)
    threats: tuple[str, ...] = THREATS
    modalities: tuple[str, ...] = MODALITIES
    workers: int = 1
    chunk: int = CHUNK

    def __post_init__(self):
        if set(self.threats) - set(THREATS) or set(self.modalities) - set(MODALITIES):
            raise HarnessConfigError("unknown threat model or modality")
        if self.workers < 1 or self.chunk < 1:
            raise HarnessConfigError("workers and chunk must be >= 1")


# ---------------------------------------------------------------- sources

@dataclass
class ImageSource:
    ids: list[str]
    images: np.ndarray
    aborted: np.ndarray

    def lookup(self) -> dict[str, int]:
        return {m: i for i, m in enumerate(self.ids)}


@dataclass
class TextSource:
    texts: dict[str, str]
    queries: dict[str, int]
    tau: float | None  # guided budget; None for random search


def _chunks(n: int, size: int) -> list[tuple[int, int]]:
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def _image_job(job):
    kind, payload, cfg = job
    if kind == "pgd":
        model, X, T, Y = payload
        return ia.surrogate_images(model, X, T, Y, cfg)
    if kind == "feature-match":
        detector, X, Z = payload
        return ia.feature_match_images(detector, X, Z, cfg), np.zeros(len(X), bool)
    if kind == "ensemble-untargeted":
        models, X, init = payload
        return ia.ensemble_images(models, X, "untargeted", cfg, init=init), np.zeros(len(X), bool)
    if kind == "ensemble-targeted":
        models, X, Z = payload
        return ia.ensemble_images(models, X, "targeted", cfg, target_images=Z), np.zeros(len(X), bool)
    raise ValueError(kind)


def _text_job(job):
    ranker, memes, images, cfg = job
    out = []
    for j, m in enumerate(memes):
        res = ta.guided_text(ranker, m, cfg, None if images is None else images[j])
        out.append((res.text, res.queries))
    return out


def _run(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _stack(memes, attr="image") -> np.ndarray:
    return np.stack([getattr(m, attr) for m in memes]).astype(np.float64)


def surrogates_for(target: MultimodalModel, models: Sequence[MultimodalModel]) -> list[MultimodalModel]:
    """Every other model whose fusion kind differs from the target's, by id."""
    return sorted((m for m in models if m.fusion != target.fusion), key=lambda m: m.model_id)


def paired(memes: Sequence[synth.Meme], dataset: synth.Dataset) -> list[tuple[synth.Meme, synth.Meme]]:
    by_id = dataset.by_id()
    return [(m, by_id[m.confounder_id]) for m in memes if m.confounder_id is not None]


def build_sources(models: Sequence[MultimodalModel], detector: det.Detector | None,
                  public: Sequence[PublicModel], dataset: synth.Dataset,
                  config: MatrixConfig) -> tuple[dict, dict, dict]:
    """Target-independent adversarial inputs. Returns (images, texts, timings)."""
    test = dataset.split("test")
    ids = [m.id for m in test]
    cfg = config.attack
    chunks = _chunks(len(test), config.chunk)
    X = _stack(test)
    T = [m.text for m in test]
    Y = np.array([m.label for m in test])
    images: dict[str, ImageSource] = {}
    texts: dict[str, TextSource] = {}
    timings: dict[str, float] = {}
    wants_image = bool({"image", "combined"} & set(config.modalities))
    wants_text = bool({"text", "combined"} & set(config.modalities))
    threats = set(config.threats)

    def gather(name, kind, payloads, sub_ids, threat):
        t = time.perf_counter()
        out = _run(_image_job, [(kind, p, cfg.with_(threat=threat)) for p in payloads], config.workers)
        adv = np.concatenate([o[0] for o in out]) if out else np.zeros((0,) + X.shape[1:])
        ab = np.concatenate([o[1] for o in out]) if out else np.zeros(0, bool)
        images[name] = ImageSource(list(sub_ids), adv, ab)
        timings[name] = time.perf_counter() - t

    if wants_image and threats & {"full-access", "dataset-access"}:
        for m in sorted(models, key=lambda m: m.model_id):
            gather(f"pgd/{m.model_id}", "pgd", [(m, X[a:b], T[a:b], Y[a:b]) for a, b in chunks],
                   ids, "full-access")
    pairs = paired(test, dataset)
    if pairs:
        PX = _stack([a for a, _ in pairs])
        PZ = _stack([b for _, b in pairs])
        pids = [a.id for a, _ in pairs]
        pchunks = _chunks(len(pairs), config.chunk)
    if wants_image and "feature-extractor-access" in threats and detector is not None and pairs:
        gather("feature-match", "feature-match", [(detector, PX[a:b], PZ[a:b]) for a, b in pchunks],
               pids, "feature-extractor-access")
    if wants_image and "no-access-savvy" in threats and public:
        init = X + np.stack([ia.random_start(X.shape[1:], cfg.epsilon,
                                             seeding.rng(config.seed, "random-start", i))
                             for i in ids])
        gather("ensemble-untargeted", "ensemble-untargeted",
               [(list(public), X[a:b], init[a:b]) for a, b in chunks], ids, "no-access-savvy")
        if pairs:
            gather("ensemble-targeted", "ensemble-targeted",
                   [(list(public), PX[a:b], PZ[a:b]) for a, b in pchunks], pids, "no-access-savvy")
    if wants_image and "no-access-naive" in threats:
        t = time.perf_counter()
        g = np.stack([ia.gaussian_image(x, cfg.epsilon, seeding.rng(config.seed, "gaussian", i))
                      for x, i in zip(X, ids)])
        images["gaussian"] = ImageSource(ids, g, np.zeros(len(ids), bool))
        timings["gaussian"] = time.perf_counter() - t

    def guided(name, ranker, adv):
        t = time.perf_counter()
        jobs = [(ranker, test[a:b], None if adv is None else adv[a:b], config.text) for a, b in chunks]
        flat = [r for o in _run(_text_job, jobs, config.workers) for r in o]
        texts[name] = TextSource({i: s for i, (s, _) in zip(ids, flat)},
                                 {i: q for i, (_, q) in zip(ids, flat)}, config.text.tau)
        timings[name] = time.perf_counter() - t

    if threats & {"full-access", "dataset-access"}:
        for m in sorted(models, key=lambda m: m.model_id):
            if wants_text:
                guided(f"guided/{m.model_id}", m, None)
            # combined attacks: the same adversary searches text against its own adversarial image
            if "combined" in config.modalities:
                guided(f"guided-after-image/{m.model_id}", m, images[f"pgd/{m.model_id}"].images)
    if wants_text and threats & {"no-access-savvy", "no-access-naive"}:
        for level in ta.LEVELS:
            t = time.perf_counter()
            texts[f"random/{level}"] = TextSource(
                {m.id: ta.random_augment(m.text, level, config.seed, m.id) for m in test},
                {m.id: 0 for m in test}, None)
            timings[f"random/{level}"] = time.perf_counter() - t
    return images, texts, timings


# ---------------------------------------------------------------- cells

@dataclass
class Cell:
    """One matrix cell: which sources feed each meme, and the outcome log."""
    model_id: str
    threat: str
    modality: str
    variant: str
    note: str
    rows: list[dict]           # per meme: id, label, image source, text source
    outcomes: list[MemeOutcome] = field(default_factory=list)
    report: FlipRateReport | None = None

    @property
    def key(self) -> str:
        return f"{self.model_id}/{self.threat}/{self.modality}/{self.variant}"


def _image_variant(target, threat, surrogates, has_detector):
    """(variant name, per-meme image source chooser, note) or None when not applicable."""
    if threat == "full-access":
        kind = "pgd" if target.extractor == "grid" else "two-step"
        return kind, lambda i: f"pgd/{target.model_id}", ""
    if threat == "dataset-access":
        if not surrogates:
            return None
        names = [f"pgd/{s.model_id}" for s in surrogates]
        return "transfer", lambda i: names[i % len(names)], "round-robin surrogates: " + ",".join(
            s.model_id for s in surrogates)
    if threat == "feature-extractor-access":
        if target.extractor != "region" or not has_detector:
            return None
        return "feature-match", lambda i: "feature-match", PAIRED_NOTE
    if threat == "no-access-savvy":
        return "ensemble-untargeted", lambda i: "ensemble-untargeted", ""
    return "gaussian", lambda i: "gaussian", ""


def _text_variant(target, threat, surrogates, combined=False):
    stem, on = ("guided-after-image", " on the adversarial image") if combined else ("guided", "")
    if threat == "full-access":
        return "guided", lambda i: f"{stem}/{target.model_id}", "ranked by target" + on
    if threat == "dataset-access":
        if not surrogates:
            return None
        names = [f"{stem}/{s.model_id}" for s in surrogates]
        return "guided-surrogate", lambda i: names[i % len(names)], "ranked by round-robin surrogates" + on
    if threat in ("no-access-savvy", "no-access-naive"):
        return "random-light", lambda i: "random/light", ""
    return None


def plan_cells(models: Sequence[MultimodalModel], dataset: synth.Dataset, config: MatrixConfig,
               has_detector: bool, has_public: bool) -> list[Cell]:
    """Every (model, threat, modality) cell in sorted order, plus note rows."""
    test = dataset.split("test")
    paired_ids = {a.id for a, _ in paired(test, dataset)}
    cells: list[Cell] = []

    def rows_for(chooser_img, chooser_txt, only_paired=False):
        rows = []
        for i, m in enumerate(test):
            if only_paired and m.id not in paired_ids:
                continue
            rows.append({"meme_id": m.id, "label": m.label,
                         "image": chooser_img(i) if chooser_img else None,
                         "text": chooser_txt(i) if chooser_txt else None})
        return rows

    for target in sorted(models, key=lambda m: m.model_id):
        sur = surrogates_for(target, models)
        for threat in THREATS:
            if threat not in config.threats:
                continue
            for modality in MODALITIES:
                if modality not in config.modalities:
                    continue
                img = _image_variant(target, threat, sur, has_detector) if modality != "text" else None
                txt = (_text_variant(target, threat, sur, modality == "combined")
                       if modality != "image" else None)
                if threat == "no-access-savvy" and modality != "text" and not has_public:
                    img = None
                applicable = {"image": img is not None, "text": txt is not None,
                              "combined": img is not None and txt is not None}[modality]
                if not applicable:
                    cells.append(Cell(target.model_id, threat, modality, NOT_APPLICABLE,
                                      NOT_APPLICABLE, []))
                    continue
                if modality == "image":
                    variant, note = img[0], img[2]
                elif modality == "text":
                    variant, note = txt[0], txt[2]
                else:
                    variant, note = f"{img[0]}+{txt[0]}", "; ".join(n for n in (img[2], txt[2]) if n)
                only_paired = modality != "text" and img is not None and img[0] == "feature-match"
                cells.append(Cell(target.model_id, threat, modality, variant, note,
                                  rows_for(img[1] if img else None, txt[1] if txt else None,
                                           only_paired)))
            # additional rows reported for reference, outside the orderings
            if threat == "no-access-savvy" and "image" in config.modalities and has_public:
                cells.append(Cell(target.model_id, threat, "image", "ensemble-targeted",
                                  "targeted ensemble; " + PAIRED_NOTE,
                                  rows_for(lambda i: "ensemble-targeted", None, True)))
            if threat == "no-access-naive" and "text" in config.modalities:
                for level in ("medium", "heavy"):
                    cells.append(Cell(target.model_id, threat, "text", f"random-{level}",
                                      f"random {level} augmentation",
                                      rows_for(None, lambda i, lv=level: f"random/{lv}")))
    return cells


def assemble(cell: Cell, dataset: synth.Dataset, images: dict, texts: dict
             ) -> tuple[list[synth.Meme], list[synth.Meme], list[bool]]:
    """Clean memes, adversarial memes and abort flags for a cell's rows."""
    by_id = dataset.by_id()
    lookups = {k: v.lookup() for k, v in images.items()}
    clean, adv, aborted = [], [], []
    for r in cell.rows:
        m = by_id[r["meme_id"]]
        img, ab = m.image, False
        if r["image"] is not None:
            src = images[r["image"]]
            j = lookups[r["image"]][m.id]
            img, ab = src.images[j], bool(src.aborted[j])
        text = texts[r["text"]].texts[m.id] if r["text"] is not None else m.text
        clean.append(m)
        adv.append(replace(m, image=img, text=text))
        aborted.append(ab)
    return clean, adv, aborted


def check_budgets(cell: Cell, clean, adv, epsilon: float, texts: dict):
    """Hard assertions: every image within the L-inf budget, every guided text within tau."""
    if not clean:
        return
    if any(r["image"] for r in cell.rows):
        ia.check_budget(np.stack([a.image for a in adv]).astype(np.float64),
                        np.stack([c.image for c in clean]).astype(np.float64), epsilon)
    for r, c, a in zip(cell.rows, clean, adv):
        src = texts.get(r["text"]) if r["text"] else None
        if src is not None and src.tau is not None:
            d = ta.normalized_edit_distance(c.text, a.text)
            if d > src.tau + 1e-12:
                raise AssertionError(f"{c.id}: guided text at distance {d:.4f} > tau {src.tau}")


def evaluate_cell(cell: Cell, model: MultimodalModel | None, dataset: synth.Dataset,
                  images: dict, texts: dict, epsilon: float) -> Cell:
    if cell.variant == NOT_APPLICABLE:
        cell.outcomes = []
        base = model if model is not None else None
        cell.report = FlipRateReport(cell.model_id, base.extractor if base else "",
                                     base.fusion if base else "", cell.threat, cell.modality,
                                     0, 0, 0, None, NOT_APPLICABLE)
        return cell
    clean, adv, aborted = assemble(cell, dataset, images, texts)
    check_budgets(cell, clean, adv, epsilon, texts)
    cell.outcomes = prediction_log(model, clean, adv, aborted)
    cell.report = report_from_log(cell.outcomes, model.model_id, model.extractor, model.fusion,
                                  cell.threat, cell.modality, cell.note)
    return cell


# ---------------------------------------------------------------- summary

MAIN_VARIANTS = {
    "image": {"pgd", "two-step", "transfer", "feature-match", "ensemble-untargeted", "gaussian"},
    "text": {"guided", "guided-surrogate", "random-light"},
}


def _main_reports(cells: Sequence[Cell]) -> dict[tuple[str, str, str], FlipRateReport]:
    """(model, threat, modality) -> report for the headline variant of each cell."""
    out = {}
    for c in cells:
        if c.variant == NOT_APPLICABLE or c.report is None:
            continue
        if c.modality == "combined" or c.variant in MAIN_VARIANTS[c.modality]:
            out[(c.model_id, c.threat, c.modality)] = c.report
    return out


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _check(name: str, pairs: list[tuple[str, float | None, str, float | None]]) -> dict:
    """Each pair (a, ra, b, rb) demands ra >= rb - tolerance."""
    steps, status = [], "pass"
    for a, ra, b, rb in pairs:
        if ra is None or rb is None:
            steps.append({"higher": a, "lower": b, "gap": None, "status": "skipped"})
            continue
        gap = ra - rb
        ok = gap >= -TOLERANCE
        status = status if ok else "warn"
        steps.append({"higher": a, "lower": b, "gap": round(gap, 6), "status": "pass" if ok else "warn"})
    if all(s["status"] == "skipped" for s in steps):
        status = "skipped"
    return {"check": name, "status": status, "steps": steps}


def summarize(cells: Sequence[Cell], models: Sequence[MultimodalModel]) -> dict:
    """Per-category averages and the ordering checks, all with a 2-point tolerance."""
    main = _main_reports(cells)
    by_id = {m.model_id: m for m in models}
    categories = {}
    for ext in ("grid", "region"):
        ids = sorted(i for i, m in by_id.items() if m.extractor == ext)
        if not ids:
            continue
        avg = {}
        for threat in THREATS:
            for modality in MODALITIES:
                rates = [main[(i, threat, modality)].flip_rate for i in ids if (i, threat, modality) in main]
                if rates:
                    avg[f"{threat}/{modality}"] = _mean(rates)
        categories[ext] = {"models": ids, "averages": avg,
                           "n_correct_clean": {f"{t}/{mo}": sum(main[(i, t, mo)].n_correct_clean
                                                                for i in ids if (i, t, mo) in main)
                                               for t in THREATS for mo in MODALITIES
                                               if any((i, t, mo) in main for i in ids)}}
    checks = []
    for ext, cat in categories.items():
        a = cat["averages"]
        g = lambda k: a.get(k)
        chain = [("full-access", g("full-access/image")), ("dataset-access", g("dataset-access/image")),
                 ("no-access-savvy", g("no-access-savvy/image")), ("no-access-naive", g("no-access-naive/image"))]
        c = _check(f"image ordering ({ext})", [(x, rx, y, ry) for (x, rx), (y, ry) in zip(chain, chain[1:])])
        gauss = g("no-access-naive/image")
        c["gaussian_ceiling"] = {"value": gauss, "limit": GAUSSIAN_CEILING,
                                 "status": "skipped" if gauss is None else
                                 ("pass" if gauss <= GAUSSIAN_CEILING else "warn")}
        if c["gaussian_ceiling"]["status"] == "warn":
            c["status"] = "warn"
        checks.append(c)
    ids_all = sorted(by_id)
    txt = [(t, _mean([main[(i, t, "text")].flip_rate for i in ids_all if (i, t, "text") in main]))
           for t in ("full-access", "dataset-access", "no-access-savvy")]
    checks.append(_check("text ordering (all models)",
                         [(x, rx, y, ry) for (x, rx), (y, ry) in zip(txt, txt[1:])]))
    comb = []
    for i in ids_all:
        for t in TEXT_THREATS:
            if (i, t, "combined") not in main:
                continue
            rc = main[(i, t, "combined")].flip_rate
            for mo in ("image", "text"):
                if (i, t, mo) in main:
                    comb.append((f"{i}/{t}/combined", rc, f"{i}/{t}/{mo}", main[(i, t, mo)].flip_rate))
    checks.append(_check("combined >= unimodal", comb))
    return {"categories": categories, "checks": checks, "tolerance": TOLERANCE}


# ---------------------------------------------------------------- matrix

@dataclass
class MatrixResult:
    cells: list[Cell]
    images: dict[str, ImageSource]
    texts: dict[str, TextSource]
    summary: dict
    timings: dict[str, float]

    @property
    def reports(self) -> list[FlipRateReport]:
        return [c.report for c in self.cells]


def run_matrix(models: Sequence[MultimodalModel], dataset: synth.Dataset,
               detector: det.Detector | None = None, public: Sequence[PublicModel] = (),
               config: MatrixConfig = MatrixConfig()) -> MatrixResult:
    """Run every applicable cell. Deterministic given the config's seed."""
    models = sorted(models, key=lambda m: m.model_id)
    if len({m.model_id for m in models}) != len(models):
        raise HarnessConfigError("model ids must be unique")
    if not models:
        return MatrixResult([], {}, {}, summarize([], []), {})
    images, texts, timings = build_sources(models, detector, public, dataset, config)
    by_id = {m.model_id: m for m in models}
    cells = plan_cells(models, dataset, config, detector is not None, bool(public))
    for c in cells:
        evaluate_cell(c, by_id[c.model_id], dataset, images, texts, config.attack.epsilon)
    return MatrixResult(cells, images, texts, summarize(cells, models), timings)


def reports_csv(reports: Sequence[FlipRateReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def summary_json(summary: dict, digests: dict) -> str:
    return json.dumps({**summary, "digests": digests}, indent=2, sort_keys=True) + "\n"
