"""On-disk layout of a run directory and the manifest format.

::

    config.json                    resolved configuration (echoed first)
    data/dataset.jsonl
    models/detector.gbt, models/public-<i>.gbt, models/<model id>.gbt
    attacks/images/<source>.gbt    adversarial images, one container per source
    attacks/texts/<source>.json    adversarial strings per meme
    manifests/<model id>/<threat>--<modality>--<variant>.json
    reports/                       CSV and JSON outputs
    stamps/<stage>.json            digests that make every stage resumable
    timings/<stage>.json           wall-clock times (kept out of every other file)
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import tensorio
from .harness import Cell, ImageSource, MemeOutcome, TextSource

MANIFEST_SCHEMA = "graybox-manifest"
MANIFEST_VERSION = 1


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        # every write stays inside the run directory
        if self.root.resolve() not in (p.resolve(), *p.resolve().parents):
            raise ValueError(f"{p} escapes the output directory")
        return p

    @property
    def dataset(self) -> Path:
        return self.path("data", "dataset.jsonl")

    @property
    def detector(self) -> Path:
        return self.path("models", "detector.gbt")

    def public(self, i: int) -> Path:
        return self.path("models", f"public-{i}.gbt")

    def model(self, model_id: str) -> Path:
        return self.path("models", f"{model_id}.gbt")

    def image_source(self, name: str) -> Path:
        return self.path("attacks", "images", name.replace("/", "--") + ".gbt")

    def text_source(self, name: str) -> Path:
        return self.path("attacks", "texts", name.replace("/", "--") + ".json")

    def manifest(self, cell: Cell) -> Path:
        return self.path("manifests", cell.model_id, f"{cell.threat}--{cell.modality}--{cell.variant}.json")

    def manifests(self) -> list[Path]:
        return sorted(self.path("manifests").glob("*/*.json"))

    def report(self, name: str) -> Path:
        return self.path("reports", name)

    def stamp(self, stage: str) -> Path:
        return self.path("stamps", f"{stage}.json")

    def timing(self, stage: str) -> Path:
        return self.path("timings", f"{stage}.json")


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_bytes(path: Path, data: bytes) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return digest_bytes(data)


def write_json(path: Path, obj) -> str:
    return write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- sources

def save_image_source(path: Path, src: ImageSource) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    return tensorio.save(path, {"images": src.images, "aborted": src.aborted.astype(np.float64)},
                         {"kind": "adversarial-images", "ids": list(src.ids)})


def load_image_source(path: Path) -> ImageSource:
    t, meta = tensorio.load(path)
    if meta.get("kind") != "adversarial-images":
        raise ValueError(f"{path}: not an adversarial image container")
    return ImageSource(list(meta["ids"]), t["images"], t["aborted"].astype(bool))


def save_text_source(path: Path, src: TextSource) -> str:
    return write_json(path, {"kind": "adversarial-texts", "tau": src.tau,
                             "texts": src.texts, "queries": src.queries})


def load_text_source(path: Path) -> TextSource:
    d = read_json(path)
    if d.get("kind") != "adversarial-texts":
        raise ValueError(f"{path}: not an adversarial text file")
    return TextSource(d["texts"], {k: int(v) for k, v in d["queries"].items()}, d["tau"])


# ---------------------------------------------------------------- manifests

def manifest_dict(cell: Cell, config: dict, digests: dict, details: list[dict]) -> dict:
    """Per-cell manifest: the same schema for image, text and combined cells."""
    return {
        "schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION,
        "model_id": cell.model_id, "threat": cell.threat, "modality": cell.modality,
        "variant": cell.variant, "note": cell.note, "config": config, "digests": digests,
        "memes": [{**r, "clean_label": o.clean_label, "adversarial_label": o.adversarial_label,
                   "aborted": o.aborted, **d}
                  for r, o, d in zip(cell.rows, cell.outcomes, details)],
        "report": cell.report.csv_row() if cell.report else None,
    }


def cell_from_manifest(d: dict) -> Cell:
    if d.get("schema") != MANIFEST_SCHEMA:
        raise ValueError("not a graybox manifest")
    rows = [{"meme_id": m["meme_id"], "label": m["label"], "image": m["image"], "text": m["text"]}
            for m in d["memes"]]
    outcomes = [MemeOutcome(m["meme_id"], m["label"], m["clean_label"], m["adversarial_label"],
                            m["aborted"]) for m in d["memes"]]
    return Cell(d["model_id"], d["threat"], d["modality"], d["variant"], d["note"], rows, outcomes)
