"""End-to-end acceptance: the default pipeline checked against the eleven criteria.

Runs the full CLI pipeline once serially and once with two workers, then
checks each criterion against the stored outputs with its own recount. Every
check records a one-line verdict that is printed at the end of the session
(see conftest.py), whether it passes or fails.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from graybox import cli, harness, synth
from graybox import autodiff as ad
from graybox import image_attacks as ia
from graybox import text_attacks as ta
from graybox.store import Layout, load_image_source, load_text_source, read_json
from graybox.zoo import Detector, MultimodalModel, PublicModel
from graybox.zoo import public as pub

from test_autodiff import BUILDERS, random_graphs

EPS = 0.1
TAU = 0.07
TOL = 0.02
MIN_MEMES = 200
STAGES = ("gen-data", "pretrain-detector", "train", "attack", "evaluate", "report")
COMPARED = ("data", "models", "attacks", "manifests", "reports")

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def run_pipeline(out, *flags):
    t = time.perf_counter()
    for stage in STAGES:
        code = cli.run_command([stage, "--out", str(out), *flags])
        assert code == 0, f"{stage} exited {code}"
    return time.perf_counter() - t


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "run"
    seconds = run_pipeline(out)
    print(f"default pipeline: {seconds:.0f} s")
    return out


@pytest.fixture(scope="module")
def layout(run_dir):
    return Layout(run_dir)


@pytest.fixture(scope="module")
def dataset(layout):
    return synth.load_dataset(layout.dataset)


@pytest.fixture(scope="module")
def models(layout):
    return {m: MultimodalModel.from_file(layout.model(m)) for m in cli.ALL_MODELS}


@pytest.fixture(scope="module")
def cells(layout):
    return read_json(layout.report("cells.json"))


@pytest.fixture(scope="module")
def manifests(layout):
    return [read_json(p) for p in layout.manifests()]


def rate(row):
    return None if row["flip_rate"] == "undefined" else float(row["flip_rate"])


def main_rows(cells):
    """(model, threat, modality) -> row of the headline variant."""
    out = {}
    for c in cells:
        if c["variant"] == harness.NOT_APPLICABLE:
            continue
        if c["modality"] == "combined" or c["variant"] in harness.MAIN_VARIANTS[c["modality"]]:
            out[(c["model_id"], c["threat"], c["modality"])] = c
    return out


def category_rate(rows, ids, threat, modality):
    picked = [rows[(i, threat, modality)] for i in ids if (i, threat, modality) in rows]
    return float(np.mean([rate(r) for r in picked])), sum(int(r["n_correct_clean"]) for r in picked)


# ---------------------------------------------------------------- 1

def test_gradient_correctness():
    start = time.perf_counter()
    graphs = list(random_graphs(50))
    worst = 0.0
    for name, graph, bindings in graphs:
        for target in bindings:
            worst = max(worst, ad.finite_diff_check(graph, bindings, target, h=1e-5))
    seconds = time.perf_counter() - start
    kinds = {name for name, _, _ in graphs} == {b.__name__ for b in BUILDERS}
    record(1, worst < 1e-4 and seconds < 60 and kinds,
           f"50 graphs over {len(BUILDERS)} op kinds, max relative error {worst:.2e} (< 1e-4), {seconds:.1f} s (< 60)")


# ---------------------------------------------------------------- 2

def test_budget_invariants(layout, dataset, manifests):
    by_id = dataset.by_id()
    n_img = n_txt = bad_img = bad_txt = 0
    images, texts = {}, {}
    for d in manifests:
        for m in d["memes"]:
            clean = by_id[m["meme_id"]]
            if m["image"]:
                if m["image"] not in images:
                    src = load_image_source(layout.image_source(m["image"]))
                    images[m["image"]] = dict(zip(src.ids, src.images))
                x = images[m["image"]][clean.id]
                n_img += 1
                bad_img += not (np.abs(x - clean.image).max() <= EPS + 1e-12 and x.min() >= 0 and x.max() <= 1)
            if m["text"] and m["text"].startswith("guided"):
                if m["text"] not in texts:
                    texts[m["text"]] = load_text_source(layout.text_source(m["text"]))
                n_txt += 1
                s = texts[m["text"]].texts[clean.id]
                bad_txt += ta.normalized_edit_distance(clean.text, s) > TAU + 1e-12
    record(2, n_img > 0 and n_txt > 0 and bad_img == 0 and bad_txt == 0,
           f"{n_img - bad_img}/{n_img} adversarial images within eps=0.1 and [0,1], "
           f"{n_txt - bad_txt}/{n_txt} guided texts within tau=0.07")


# ---------------------------------------------------------------- 3

def test_metric_oracle(manifests):
    checked = mismatched = 0
    for d in manifests:
        if d["variant"] == harness.NOT_APPLICABLE:
            continue
        kept = [m for m in d["memes"] if not m["aborted"]]
        correct = [m for m in kept if m["clean_label"] == m["label"]]
        flipped = [m for m in correct if m["adversarial_label"] != m["label"]]
        r = d["report"]
        expected = "undefined" if not correct else f"{len(flipped) / len(correct):.6f}"
        ok = (r["n_eval"], r["n_correct_clean"], r["n_flipped"], r["flip_rate"]) == \
             (len(kept), len(correct), len(flipped), expected)
        checked += 1
        mismatched += not ok
    record(3, checked > 0 and mismatched == 0,
           f"{checked - mismatched}/{checked} cells match a recount of their prediction logs")


# ---------------------------------------------------------------- 4

def test_training_floor(layout, dataset, models):
    test = dataset.split("test")
    seconds = read_json(layout.timing("train"))
    X, T = np.stack([m.image for m in test]), [m.text for m in test]
    y = np.array([m.label for m in test])
    acc = {i: float(np.mean([p.label for p in m.predict(X, T)] == y)) for i, m in models.items()}
    counts = (len(dataset.split("train")), len(test))
    ok = counts == (2000, 500) and all(a >= 0.85 for a in acc.values()) and \
        all(seconds[i] < 300 for i in models)
    record(4, ok, "clean accuracy " + ", ".join(f"{i} {acc[i]:.3f} ({seconds[i]:.0f} s)" for i in sorted(acc))
           + " (>= 0.85, < 300 s each)")


# ---------------------------------------------------------------- 5

def test_full_access_strength(cells, models):
    rows = main_rows(cells)
    grid = {i: rate(rows[(i, "full-access", "image")]) for i in models if i.startswith("grid")}
    region = {i: rate(rows[(i, "full-access", "image")]) for i in models if i.startswith("region")}
    ok = all(r >= 0.90 for r in grid.values()) and all(r >= 0.40 for r in region.values())
    record(5, ok, "pgd " + ", ".join(f"{i} {r:.3f}" for i, r in sorted(grid.items())) + " (>= 0.90); two-step "
           + ", ".join(f"{i} {r:.3f}" for i, r in sorted(region.items())) + " (>= 0.40)")


# ---------------------------------------------------------------- 6

def test_image_attack_ordering(cells, models):
    rows = main_rows(cells)
    chain = ("full-access", "dataset-access", "no-access-savvy", "no-access-naive")
    ok, parts = True, []
    for ext in ("grid", "region"):
        ids = sorted(i for i in models if i.startswith(ext))
        vals = [category_rate(rows, ids, t, "image") for t in chain]
        enough = all(n >= MIN_MEMES for _, n in vals)
        gaps = [a[0] - b[0] for a, b in zip(vals, vals[1:])]
        cat_ok = enough and all(g >= -TOL for g in gaps) and vals[-1][0] <= 0.15
        ok &= cat_ok
        parts.append(f"{ext} full {vals[0][0]:.3f} >= transfer {vals[1][0]:.3f} >= ensemble {vals[2][0]:.3f}"
                     f" >= gaussian {vals[3][0]:.3f} (gaussian <= 0.15, min n {min(n for _, n in vals)})")
    record(6, ok, "; ".join(parts))


# ---------------------------------------------------------------- 7

def test_text_attack_ordering(cells, models):
    rows = main_rows(cells)
    ids = sorted(models)
    guided, n1 = category_rate(rows, ids, "full-access", "text")
    surrogate, n2 = category_rate(rows, ids, "dataset-access", "text")
    light, n3 = category_rate(rows, ids, "no-access-savvy", "text")
    variants = {c["variant"] for c in cells if c["modality"] == "text"}
    ok = min(n1, n2, n3) >= MIN_MEMES and guided >= surrogate - TOL and surrogate >= light - TOL \
        and {"guided", "guided-surrogate", "random-light"} <= variants
    record(7, ok, f"guided/target {guided:.3f} >= guided/surrogate {surrogate:.3f} >= random light {light:.3f}"
           f" at tau=0.07 (min n {min(n1, n2, n3)})")


# ---------------------------------------------------------------- 8

def test_combined_beats_unimodal(cells, models):
    rows = main_rows(cells)
    worst, n = None, 0
    for i in sorted(models):
        for t in harness.TEXT_THREATS:
            if (i, t, "combined") not in rows:
                continue
            best = max(rate(rows[(i, t, "image")]), rate(rows[(i, t, "text")]))
            gap = rate(rows[(i, t, "combined")]) - best
            n += 1
            if worst is None or gap < worst[0]:
                worst = (gap, f"{i}/{t}")
    ok = n == len(models) * len(harness.TEXT_THREATS) and worst[0] >= -TOL
    record(8, ok, f"{n} (model, threat) pairs, smallest combined - max(unimodal) gap {worst[0]:+.3f} at {worst[1]}"
           " (>= -0.02)")


# ---------------------------------------------------------------- 9

def test_feature_match_descent(layout, dataset, cells):
    detector = Detector.from_file(layout.detector)
    by_id = dataset.by_id()
    paired_ids = [m.id for m in dataset.split("test") if m.confounder_id is not None]
    src = load_image_source(layout.image_source("feature-match"))
    X = np.stack([by_id[i].image for i in src.ids])
    Z = np.stack([by_id[by_id[i].confounder_id].image for i in src.ids])
    ratio = ia.backbone_distance(detector, src.images, Z) / ia.backbone_distance(detector, X, Z)
    frac = float(np.mean(ratio <= 0.5))
    fm = [c for c in cells if c["variant"] == "feature-match"]
    denominated = bool(fm) and all(int(c["n_eval"]) == len(paired_ids) and harness.PAIRED_NOTE in c["note"]
                                   for c in fm)
    ok = sorted(src.ids) == sorted(paired_ids) and frac >= 0.90 and denominated
    record(9, ok, f"{frac:.3f} of {len(ratio)} paired memes reach >= 50% feature-distance reduction (>= 0.90),"
           f" median remaining {np.median(ratio):.3f}; reports over paired memes only: {denominated}")


# ---------------------------------------------------------------- 10

def test_determinism(run_dir, tmp_path_factory):
    other = tmp_path_factory.mktemp("acceptance-parallel") / "run"
    seconds = run_pipeline(other, "--workers", "2")
    print(f"parallel pipeline: {seconds:.0f} s")
    files = sorted(p.relative_to(run_dir) for part in COMPARED for p in (run_dir / part).rglob("*") if p.is_file())
    twins = sorted(p.relative_to(other) for part in COMPARED for p in (other / part).rglob("*") if p.is_file())
    differing = [str(p) for p in files if (run_dir / p).read_bytes() != (other / p).read_bytes()] \
        if files == twins else ["file lists differ"]
    record(10, bool(files) and not differing,
           f"{len(files) - len(differing)}/{len(files)} dataset, model, attack, manifest and report files"
           f" byte-identical between a serial and a two-worker run" + (f"; differing: {differing[:3]}" if differing else ""))


# ---------------------------------------------------------------- 11

def randomized(model: MultimodalModel, seed: int) -> MultimodalModel:
    rng = np.random.default_rng(seed)
    params = {k: rng.normal(size=v.shape) for k, v in model.params.items()}
    detector = None
    if model.detector is not None:
        detector = replace(model.detector, params={k: rng.normal(size=v.shape)
                                                   for k, v in model.detector.params.items()})
    return replace(model, params=params, detector=detector)


def test_threat_model_isolation(layout, dataset, models):
    # a self-contained slice: 20 paired memes, their partners and 10 unpaired memes
    test = dataset.split("test")
    first = [m for m in test if m.confounder_id is not None][:20]
    unpaired = [m for m in test if m.confounder_id is None][:10]
    keep = {m.id for m in first + unpaired} | {m.confounder_id for m in first}
    sub = synth.Dataset([m for m in test if m.id in keep], dataset.seed)
    detector = Detector.from_file(layout.detector)
    public = [PublicModel.from_file(layout.public(i)) for i in range(len(pub.ARCHITECTURES))]
    cfg = harness.MatrixConfig(seed=7, modalities=("image",))
    base, _, _ = harness.build_sources(list(models.values()), detector, public, sub, cfg)
    gray = ("dataset-access", "feature-extractor-access", "no-access-savvy", "no-access-naive")
    compared = changed = 0
    for k, target in enumerate(sorted(models)):
        swapped = [randomized(m, 100 + k) if i == target else m for i, m in models.items()]
        images, _, _ = harness.build_sources(swapped, detector, public, sub, cfg)
        for cell in harness.plan_cells(swapped, sub, cfg, True, True):
            if cell.model_id != target or cell.threat not in gray or cell.variant == harness.NOT_APPLICABLE:
                continue
            _, a, _ = harness.assemble(cell, sub, base, {})
            _, b, _ = harness.assemble(cell, sub, images, {})
            for x, y in zip(a, b):
                compared += 1
                changed += x.image.tobytes() != y.image.tobytes()
    record(11, compared > 0 and changed == 0,
           f"{compared - changed}/{compared} transfer, feature-match, ensemble and gaussian images unchanged"
           " when the target's parameters are randomized")
