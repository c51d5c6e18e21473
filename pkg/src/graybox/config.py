"""Run configuration: defaults, JSON file, then command-line overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import image_attacks as ia
from . import seeding
from . import text_attacks as ta
from .harness import MODALITIES, THREATS, MatrixConfig
from .zoo.classifier import ACCURACY_FLOOR, EXTRACTORS, FUSIONS

ALL_MODELS = tuple(f"{e}-{f}" for e in EXTRACTORS for f in FUSIONS)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    workers: int = 1
    # dataset
    n_train: int = 2000
    n_test: int = 500
    confounder_fraction: float = 0.5
    # public components
    n_generic: int = 2000
    n_generic_heldout: int = 500
    detector_epochs: int = 16
    public_epochs: int = 10
    # classifiers
    models: tuple[str, ...] = ALL_MODELS
    epochs: int = 40
    batch_size: int = 50
    lr: float = 3e-3
    accuracy_floor: float = ACCURACY_FLOOR
    # image attacks
    epsilon: float = 0.1
    alpha: float = 0.05
    steps: int = 40
    step_rule: str = "gradient"
    # text attacks
    tau: float = ta.LIGHT_TAU
    beam_width: int = 5
    branch: int = 8
    max_iterations: int = 30
    # matrix
    threats: tuple[str, ...] = THREATS
    modalities: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        bad = set(self.models) - set(ALL_MODELS)
        if bad:
            raise ConfigError(f"unknown model ids {sorted(bad)}")
        if len(set(self.models)) != len(self.models):
            raise ConfigError("duplicate model ids")
        if min(self.n_train, self.n_test, self.n_generic, self.n_generic_heldout) < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        # the attack configs validate their own ranges
        try:
            self.attack_config()
            self.text_config()
            self.matrix_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    # -- derived seeds: stage name plus item id
    def seed_for(self, *parts) -> int:
        return seeding.derive(self.seed, *parts)

    def attack_config(self) -> ia.AttackConfig:
        return ia.AttackConfig(epsilon=self.epsilon, alpha=self.alpha, steps=self.steps,
                               step_rule=self.step_rule)

    def text_config(self) -> ta.TextAttackConfig:
        return ta.TextAttackConfig(tau=self.tau, beam_width=self.beam_width, branch=self.branch,
                                   max_iterations=self.max_iterations, seed=self.seed_for("attack-text"))

    def matrix_config(self) -> MatrixConfig:
        return MatrixConfig(seed=self.seed_for("attack"), attack=self.attack_config(),
                            text=self.text_config(), threats=tuple(self.threats),
                            modalities=tuple(self.modalities), workers=self.workers)

    # -- serialization
    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def stage_hash(self, keys) -> str:
        """Digest of the fields a stage depends on (never the output dir or worker count)."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in sorted(keys)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
TUPLE_FIELDS = {"models", "threats", "modalities"}

STAGE_KEYS = {
    "gen-data": ("seed", "n_train", "n_test", "confounder_fraction"),
    "pretrain-detector": ("seed", "n_generic", "n_generic_heldout", "detector_epochs",
                          "public_epochs", "batch_size", "lr"),
    "train": ("seed", "models", "epochs", "batch_size", "lr", "accuracy_floor"),
    "attack": ("seed", "models", "epsilon", "alpha", "steps", "step_rule", "tau", "beam_width",
               "branch", "max_iterations", "threats", "modalities"),
}
STAGE_KEYS["evaluate"] = STAGE_KEYS["attack"]
STAGE_KEYS["report"] = STAGE_KEYS["attack"]


def _coerce(name: str, value):
    if name in TUPLE_FIELDS:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list")
        return tuple(str(v) for v in value)
    default = getattr(RunConfig, name)
    try:
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flags win)."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(str(p))
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: expected a JSON object")
        values.update(raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(values) - set(FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
