"""Experiment configuration: a single JSON document, strictly validated.

Unknown keys are rejected at every nesting level so typos fail fast, before
any output is written.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .attacks import ATTACK_NAMES, AttackConfig
from .data import SyntheticConfig
from .evaluate import AdvTrainConfig, TrainConfig
from .models import BackboneConfig

__all__ = ["ConfigError", "ExperimentConfig", "SweepSpec", "load_config"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _require_keys(d: dict, allowed: set, ctx: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{ctx}: expected an object, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown key(s) {sorted(unknown)}")


def _synthetic_from(d: dict) -> SyntheticConfig:
    allowed = {"n_cancer", "n_control", "image_shape", "lesion_intensity",
               "lesion_radius", "background_scale", "drift_scale", "seed"}
    _require_keys(d, allowed, "synthetic")
    try:
        return SyntheticConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic: {exc}") from None


def _model_from(d: dict) -> BackboneConfig:
    allowed = {"input_shape", "conv_channels", "embed_dim", "heads", "tokens"}
    _require_keys(d, allowed, "model")
    try:
        return BackboneConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def _train_from(d: dict) -> TrainConfig:
    allowed = {"epochs", "learning_rate", "batch_size", "augment_flip",
               "augment_rotate", "seed", "adversarial_training"}
    _require_keys(d, allowed, "train")
    d = dict(d)
    adv = d.pop("adversarial_training", None)
    if adv is not None:
        _require_keys(adv, {"attack", "epsilon", "batch_size", "iterations"},
                      "train.adversarial_training")
        try:
            adv = AdvTrainConfig(**adv)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train.adversarial_training: {exc}") from None
    try:
        return TrainConfig(**d, adversarial_training=adv)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def _attack_from(d: dict, idx: int):
    if not isinstance(d, dict):
        raise ConfigError(f"attacks[{idx}]: expected an object")
    d = dict(d)
    name = d.pop("attack", None)
    if name not in ATTACK_NAMES:
        raise ConfigError(f"attacks[{idx}]: unknown attack {name!r}; "
                          f"choose from {list(ATTACK_NAMES)}")
    try:
        return name, AttackConfig.from_json(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"attacks[{idx}] ({name}): {exc}") from None


@dataclass
class SweepSpec:
    epsilon: list | None = None
    iterations: list | None = None
    attacks: list | None = None  # subset of the experiment's attack names

    def grid(self) -> dict:
        grid = {}
        if self.epsilon:
            grid["epsilon"] = [float(e) for e in self.epsilon]
        if self.iterations:
            grid["iterations"] = [int(i) for i in self.iterations]
        return grid


def _sweep_from(d: dict) -> SweepSpec:
    _require_keys(d, {"epsilon", "iterations", "attacks"}, "sweep")
    spec = SweepSpec(**d)
    for axis in ("epsilon", "iterations"):
        vals = getattr(spec, axis)
        if vals is not None and (not isinstance(vals, list) or not vals):
            raise ConfigError(f"sweep.{axis}: expected a non-empty list")
    if not spec.grid():
        raise ConfigError("sweep: needs at least one of 'epsilon'/'iterations'")
    return spec


@dataclass
class ExperimentConfig:
    """Validated top-level experiment document."""

    seed: int = 0
    out: str | None = None
    folds: int = 5
    synthetic: SyntheticConfig | None = None
    manifest: str | None = None
    model: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: list = field(default_factory=list)
    sweep: SweepSpec | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        allowed = {"seed", "out", "folds", "synthetic", "manifest", "model",
                   "train", "attacks", "sweep"}
        _require_keys(d, allowed, "config")
        if "manifest" in d and "synthetic" in d:
            raise ConfigError("config: give either 'synthetic' or 'manifest', not both")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"config: seed must be an integer, got {seed!r}")
        folds = d.get("folds", 5)
        if not isinstance(folds, int) or isinstance(folds, bool) or folds < 2:
            raise ConfigError(f"config: folds must be an integer >= 2, got {folds!r}")
        out = d.get("out")
        if out is not None and not isinstance(out, str):
            raise ConfigError("config: out must be a string path")
        manifest = d.get("manifest")
        if manifest is not None and not isinstance(manifest, str):
            raise ConfigError("config: manifest must be a string path")
        synthetic = None
        if manifest is None:
            synthetic = _synthetic_from(d.get("synthetic", {}))
        model = _model_from(d.get("model", {}))
        train = _train_from(d.get("train", {}))
        attacks_raw = d.get("attacks", [])
        if not isinstance(attacks_raw, list):
            raise ConfigError("config: attacks must be a list")
        attacks = [_attack_from(a, i) for i, a in enumerate(attacks_raw)]
        names = [n for n, _ in attacks]
        if len(names) != len(set(names)):
            raise ConfigError("config: duplicate attack names")
        sweep = _sweep_from(d["sweep"]) if "sweep" in d else None
        if sweep is not None and sweep.attacks is not None:
            missing = [a for a in sweep.attacks if a not in names]
            if missing:
                raise ConfigError(f"sweep.attacks: {missing} not in the attacks list")
        return cls(seed=seed, out=out, folds=folds, synthetic=synthetic,
                   manifest=manifest, model=model, train=train,
                   attacks=attacks, sweep=sweep)

    def sweep_attacks(self):
        if self.sweep is None or self.sweep.attacks is None:
            return list(self.attacks)
        return [(n, c) for n, c in self.attacks if n in self.sweep.attacks]


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)
