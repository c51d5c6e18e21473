"""Command-line front end: ``graybox <stage> [flags]``.

Stages: gen-data, pretrain-detector, train, attack, evaluate, report. Each
stage writes only inside ``--out``, echoes the resolved config first, and
records a stamp of input/output digests so that a rerun with the same
config is a verified no-op. Failures print one ``key=value`` line to stderr
and exit with a code specific to the failure kind.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import harness, synth, tensorio
from . import image_attacks as ia
from . import text_attacks as ta
from .config import ALL_MODELS, STAGE_KEYS, ConfigError, RunConfig, load_config
from .store import (Layout, cell_from_manifest, load_image_source, load_text_source,
                    manifest_dict, read_json, save_image_source, save_text_source, write_bytes,
                    write_json)
from .zoo import Detector, MultimodalModel, PublicModel, TrainingFailure
from .zoo import detector as det
from .zoo import public as pub
from .zoo.classifier import train_classifier

STAGES = ("gen-data", "pretrain-detector", "train", "attack", "evaluate", "report")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "missing-input": 3,
    "missing-model": 4,
    "below-floor": 5,
    "digest-mismatch": 6,
    "config": 7,
    "attack-abort": 8,
}


class CliError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind, self.detail = kind, detail


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# flags mirror RunConfig fields; list fields take comma-separated values
_FLAGS = {
    "seed": int, "workers": int, "n_train": int, "n_test": int, "confounder_fraction": float,
    "n_generic": int, "n_generic_heldout": int, "detector_epochs": int, "public_epochs": int,
    "models": str, "epochs": int, "batch_size": int, "lr": float, "accuracy_floor": float,
    "epsilon": float, "alpha": float, "steps": int, "step_rule": str, "tau": float,
    "beam_width": int, "branch": int, "max_iterations": int, "threats": str, "modalities": str,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graybox", description="Gray-box adversarial evaluation of multimodal classifiers.")
    sub = p.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for stage in STAGES:
        s = sub.add_parser(stage)
        s.add_argument("--config", help="JSON config file; flags override its values")
        s.add_argument("--out", dest="output_dir", help="run directory (default: ./run)")
        for name, typ in _FLAGS.items():
            s.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    return p


# ---------------------------------------------------------------- stamps

def _file_digest(path: Path) -> str:
    return tensorio.file_digest(path)


def _rel(layout: Layout, path: Path) -> str:
    return path.relative_to(layout.root).as_posix()


def _inputs(layout: Layout, paths) -> dict:
    out = {}
    for p in paths:
        if not p.is_file():
            kind = "missing-model" if p.suffix == ".gbt" else "missing-input"
            raise CliError(kind, f"path={_rel(layout, p)}")
        out[_rel(layout, p)] = _file_digest(p)
    return out


def _up_to_date(layout: Layout, stage: str, cfg: RunConfig, inputs: dict) -> bool:
    path = layout.stamp(stage)
    if not path.is_file():
        return False
    s = read_json(path)
    if s.get("config") != cfg.stage_hash(STAGE_KEYS[stage]) or s.get("inputs") != inputs:
        return False
    for rel, digest in s["outputs"].items():
        p = layout.path(rel)
        if not p.is_file():
            return False
        if _file_digest(p) != digest:
            raise CliError("digest-mismatch", f"path={rel} changed since {stage} last ran")
    return True


def _stamp(layout: Layout, stage: str, cfg: RunConfig, inputs: dict, outputs: dict):
    write_json(layout.stamp(stage), {"stage": stage, "config": cfg.stage_hash(STAGE_KEYS[stage]),
                                     "inputs": inputs, "outputs": dict(sorted(outputs.items()))})


# ---------------------------------------------------------------- loading

def _load_models(layout: Layout, ids) -> list[MultimodalModel]:
    out = []
    for i in ids:
        p = layout.model(i)
        if not p.is_file():
            raise CliError("missing-model", f"path={_rel(layout, p)}")
        out.append(MultimodalModel.from_file(p))
    return out


def _require(layout: Layout, path: Path, kind="missing-input"):
    if not path.is_file():
        raise CliError(kind, f"path={_rel(layout, path)}")
    return path


# ---------------------------------------------------------------- stages

def stage_gen_data(cfg: RunConfig, layout: Layout) -> dict:
    ds = synth.generate_dataset(cfg.seed_for("gen-data"), cfg.n_train, cfg.n_test,
                                cfg.confounder_fraction)
    layout.dataset.parent.mkdir(parents=True, exist_ok=True)
    return {_rel(layout, layout.dataset): synth.save_dataset(ds, layout.dataset)}


def _public_job(args):
    i, arch, images, glyphs, seed, heldout, epochs, batch, lr = args
    return pub.train_public(f"public-{i}", arch, images, glyphs, seed, heldout=heldout,
                            epochs=epochs, batch_size=batch, lr=lr)


def stage_pretrain(cfg: RunConfig, layout: Layout) -> dict:
    gseed = cfg.seed_for("generic")
    images, glyphs = synth.generic_scenes(gseed, cfg.n_generic, "generic")
    heldout = synth.generic_scenes(gseed, cfg.n_generic_heldout, "generic-heldout")
    try:
        d = det.pretrain_detector(images, glyphs, cfg.seed_for("detector"), heldout=heldout,
                                  epochs=cfg.detector_epochs, batch_size=cfg.batch_size, lr=cfg.lr)
    except TrainingFailure as e:
        raise CliError("below-floor", f"model=detector {e}") from None
    layout.detector.parent.mkdir(parents=True, exist_ok=True)
    out = {_rel(layout, layout.detector): d.to_file(layout.detector)}
    jobs = [(i, arch, images, glyphs, cfg.seed_for("public", i), heldout, cfg.public_epochs,
             cfg.batch_size, cfg.lr) for i, arch in enumerate(pub.ARCHITECTURES)]
    for i, pm in enumerate(harness._run(_public_job, jobs, cfg.workers)):
        out[_rel(layout, layout.public(i))] = pm.to_file(layout.public(i))
    return out


def _train_job(args):
    dataset, model_id, seed, detector, epochs, batch, lr, floor = args
    ext, fus = model_id.split("-")
    t = time.perf_counter()
    try:
        model = train_classifier(dataset, ext, fus, seed, detector=detector, epochs=epochs,
                                 batch_size=batch, lr=lr, floor=floor)
    except TrainingFailure as e:
        return str(e), time.perf_counter() - t
    return model, time.perf_counter() - t


def stage_train(cfg: RunConfig, layout: Layout) -> dict:
    ds = synth.load_dataset(_require(layout, layout.dataset))
    needs_detector = any(m.startswith("region") for m in cfg.models)
    d = Detector.from_file(_require(layout, layout.detector, "missing-model")) if needs_detector else None
    jobs = [(ds, m, cfg.seed_for("train", m), d if m.startswith("region") else None, cfg.epochs,
             cfg.batch_size, cfg.lr, cfg.accuracy_floor) for m in cfg.models]
    out, seconds = {}, {}
    for m, (result, secs) in zip(cfg.models, harness._run(_train_job, jobs, cfg.workers)):
        seconds[m] = round(secs, 3)
        if isinstance(result, str):
            raise CliError("below-floor", f"model={m} {result}")
        p = layout.model(m)
        p.parent.mkdir(parents=True, exist_ok=True)
        out[_rel(layout, p)] = result.to_file(p, detector_file=str(layout.detector) if result.detector else None)
    write_json(layout.timing("train"), seconds)
    return out


def _details(cell: harness.Cell, clean, adv, texts) -> list[dict]:
    out = []
    for r, c, a in zip(cell.rows, clean, adv):
        d = {}
        if r["image"] is not None:
            d["linf"] = float(np.abs(a.image - c.image).max())
        if r["text"] is not None:
            d["edit_distance"] = ta.normalized_edit_distance(c.text, a.text)
            d["queries"] = texts[r["text"]].queries[c.id]
        out.append(d)
    return out


def stage_attack(cfg: RunConfig, layout: Layout) -> dict:
    ds = synth.load_dataset(_require(layout, layout.dataset))
    models = _load_models(layout, cfg.models)
    for m in models:
        if m.clean_accuracy is None or m.clean_accuracy < cfg.accuracy_floor:
            raise CliError("below-floor", f"model={m.model_id} accuracy={m.clean_accuracy}")
    detector = Detector.from_file(layout.detector) if layout.detector.is_file() else None
    public = [PublicModel.from_file(layout.public(i)) for i in range(len(pub.ARCHITECTURES))
              if layout.public(i).is_file()]
    try:
        result = harness.run_matrix(models, ds, detector, public, cfg.matrix_config())
    except ia.AttackAbort as e:
        raise CliError("attack-abort", str(e)) from None
    out = {}
    src_digests = {}
    for name, src in sorted(result.images.items()):
        p = layout.image_source(name)
        src_digests[name] = out[_rel(layout, p)] = save_image_source(p, src)
    for name, src in sorted(result.texts.items()):
        p = layout.text_source(name)
        src_digests[name] = out[_rel(layout, p)] = save_text_source(p, src)
    ds_digest = _file_digest(layout.dataset)
    model_digests = {m.model_id: _file_digest(layout.model(m.model_id)) for m in models}
    att = cfg.attack_config()
    config_echo = {"attack": {k: getattr(att, k) for k in ("epsilon", "alpha", "steps", "step_rule",
                                                           "vector_lr", "vector_steps",
                                                           "vector_target_loss")},
                   "text": {k: getattr(cfg.text_config(), k) for k in ("tau", "beam_width", "branch",
                                                                        "max_iterations", "seed")},
                   "matrix_seed": cfg.matrix_config().seed}
    for cell in result.cells:
        clean, adv, _ = harness.assemble(cell, ds, result.images, result.texts)
        used = sorted({r[k] for r in cell.rows for k in ("image", "text") if r[k]})
        digests = {"dataset": ds_digest, "model": model_digests[cell.model_id],
                   "sources": {u: src_digests[u] for u in used}}
        p = layout.manifest(cell)
        out[_rel(layout, p)] = write_json(p, manifest_dict(cell, config_echo, digests,
                                                           _details(cell, clean, adv, result.texts)))
    p = layout.report("attack_flip_rates.csv")
    out[_rel(layout, p)] = write_bytes(p, harness.reports_csv(result.reports).encode())
    write_json(layout.timing("attack"), {k: round(v, 3) for k, v in sorted(result.timings.items())})
    return out


def stage_evaluate(cfg: RunConfig, layout: Layout) -> dict:
    """Recompute every cell from stored manifests, sources and models."""
    ds = synth.load_dataset(_require(layout, layout.dataset))
    models = {m.model_id: m for m in _load_models(layout, cfg.models)}
    paths = layout.manifests()
    images, texts, cells = {}, {}, []
    for path in paths:
        d = read_json(path)
        cell = cell_from_manifest(d)
        if cell.model_id not in models:
            continue
        for r in cell.rows:
            if r["image"] and r["image"] not in images:
                images[r["image"]] = load_image_source(_require(layout, layout.image_source(r["image"])))
            if r["text"] and r["text"] not in texts:
                texts[r["text"]] = load_text_source(_require(layout, layout.text_source(r["text"])))
        logged = list(cell.outcomes)
        harness.evaluate_cell(cell, models[cell.model_id], ds, images, texts, cfg.epsilon)
        if cell.variant != harness.NOT_APPLICABLE and cell.outcomes != logged:
            raise CliError("digest-mismatch", f"manifest={_rel(layout, path)} recomputed predictions differ")
        if d["report"] != cell.report.csv_row():
            raise CliError("digest-mismatch", f"manifest={_rel(layout, path)} recomputed flip rate differs")
        cells.append(cell)
    order = {(t, mo): i for i, (t, mo) in enumerate((t, mo) for t in harness.THREATS for mo in harness.MODALITIES)}
    cells.sort(key=lambda c: (c.model_id, order[(c.threat, c.modality)], c.variant))
    summary = harness.summarize(cells, list(models.values()))
    digests = {"dataset": _file_digest(layout.dataset),
               "models": {i: _file_digest(layout.model(i)) for i in sorted(models)}}
    out = {}
    p = layout.report("flip_rates.csv")
    out[_rel(layout, p)] = write_bytes(p, harness.reports_csv([c.report for c in cells]).encode())
    p = layout.report("summary.json")
    out[_rel(layout, p)] = write_bytes(p, harness.summary_json(summary, digests).encode())
    p = layout.report("cells.json")
    out[_rel(layout, p)] = write_json(p, [{**c.report.csv_row(), "variant": c.variant} for c in cells])
    return out


def _fmt(x) -> str:
    return "n/a" if x is None else f"{100 * x:.1f}"


def render_tables(cells: list[dict], summary: dict) -> str:
    """Markdown tables: image attacks, text attacks, combined attacks, checks."""
    def rate(r):
        return None if r["flip_rate"] in ("undefined", "") else float(r["flip_rate"])

    groups = defaultdict(list)
    for r in cells:
        if r["variant"] != harness.NOT_APPLICABLE:
            groups[(r["extractor"], r["threat"], r["modality"], r["variant"])].append(rate(r))

    def avg(ext, threat, modality, variant):
        xs = [x for x in groups.get((ext, threat, modality, variant), []) if x is not None]
        return float(np.mean(xs)) if xs else None

    lines = ["# Flip rates (%) of originally-correct memes", ""]
    lines += ["## Image attacks, averaged per extractor category", "",
              "| threat model | attack | grid | region |", "|---|---|---|---|"]
    img_rows = [("full-access", ("pgd", "two-step")), ("dataset-access", ("transfer",)),
                ("feature-extractor-access", ("feature-match",)),
                ("no-access-savvy", ("ensemble-untargeted",)), ("no-access-savvy", ("ensemble-targeted",)),
                ("no-access-naive", ("gaussian",))]
    for threat, variants in img_rows:
        vals = {e: next((avg(e, threat, "image", v) for v in variants
                         if avg(e, threat, "image", v) is not None), None) for e in ("grid", "region")}
        lines.append(f"| {threat} | {'/'.join(variants)} | {_fmt(vals['grid'])} | {_fmt(vals['region'])} |")
    lines += ["", "## Text attacks, averaged per extractor category", "",
              "| threat model | attack | grid | region |", "|---|---|---|---|"]
    for threat, variant in [("full-access", "guided"), ("dataset-access", "guided-surrogate"),
                            ("no-access-savvy", "random-light"), ("no-access-naive", "random-medium"),
                            ("no-access-naive", "random-heavy")]:
        lines.append(f"| {threat} | {variant} | {_fmt(avg('grid', threat, 'text', variant))} | "
                     f"{_fmt(avg('region', threat, 'text', variant))} |")
    lines += ["", "## Combined image and text attacks, per model", ""]
    threats = list(harness.TEXT_THREATS)
    lines += ["| model | " + " | ".join(threats) + " |", "|---" * (len(threats) + 1) + "|"]
    for mid in sorted({r["model_id"] for r in cells}):
        vals = []
        for t in threats:
            rs = [rate(r) for r in cells if r["model_id"] == mid and r["threat"] == t
                  and r["modality"] == "combined" and r["variant"] != harness.NOT_APPLICABLE]
            vals.append(_fmt(rs[0] if rs else None))
        lines.append(f"| {mid} | " + " | ".join(vals) + " |")
    lines += ["", "## Ordering checks (tolerance 2 points)", ""]
    for c in summary.get("checks", []):
        lines.append(f"- {c['check']}: {c['status']}")
    return "\n".join(lines) + "\n"


def stage_report(cfg: RunConfig, layout: Layout) -> dict:
    cells = read_json(_require(layout, layout.report("cells.json")))
    summary = read_json(_require(layout, layout.report("summary.json")))
    p = layout.report("tables.md")
    return {_rel(layout, p): write_bytes(p, render_tables(cells, summary).encode())}


STAGE_FUNCS = {
    "gen-data": (stage_gen_data, lambda cfg, L: []),
    "pretrain-detector": (stage_pretrain, lambda cfg, L: []),
    "train": (stage_train, lambda cfg, L: [L.dataset] + (
        [L.detector] if any(m.startswith("region") for m in cfg.models) else [])),
    "attack": (stage_attack, lambda cfg, L: [L.dataset] + [L.model(m) for m in cfg.models]),
    "evaluate": (stage_evaluate, lambda cfg, L: [L.dataset] + [L.model(m) for m in cfg.models]),
    "report": (stage_report, lambda cfg, L: [L.report("cells.json"), L.report("summary.json")]),
}


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: getattr(args, k) for k in (*_FLAGS, "output_dir")}
        cfg = load_config(args.config, overrides)
        layout = Layout(cfg.output_dir)
        layout.root.mkdir(parents=True, exist_ok=True)
        write_bytes(layout.path("config.json"), cfg.to_json().encode())
        fn, inputs_of = STAGE_FUNCS[args.stage]
        inputs = _inputs(layout, inputs_of(cfg, layout))
        if args.stage == "evaluate":
            inputs.update(_inputs(layout, [layout.report("attack_flip_rates.csv")]))
        if _up_to_date(layout, args.stage, cfg, inputs):
            print(f"graybox: stage={args.stage} status=up-to-date")
            return 0
        t = time.perf_counter()
        outputs = fn(cfg, layout)
        _stamp(layout, args.stage, cfg, inputs, outputs)
        timing = layout.timing(args.stage + "-total")
        write_json(timing, {"seconds": round(time.perf_counter() - t, 3)})
        print(f"graybox: stage={args.stage} status=done outputs={len(outputs)}")
        return 0
    except CliError as e:
        return _fail(e.kind, e.detail)
    except FileNotFoundError as e:
        return _fail("missing-input", f"path={e}")
    except ConfigError as e:
        return _fail("config", str(e))
    except harness.HarnessConfigError as e:
        return _fail("config", str(e))


def _fail(kind: str, detail: str) -> int:
    detail = " ".join(str(detail).split())
    print(f"graybox: error={kind} {detail}", file=sys.stderr)
    return EXIT_CODES[kind]


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
