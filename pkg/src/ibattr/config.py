"""Run configuration: one YAML/JSON file with data, model, train, attribution and
evaluation sections plus a master seed.

Section seeds left unset inherit the master seed, so ``--seed`` alone changes
every random choice of a run. The resolved configuration (all defaults filled
in) is what gets embedded into output artifacts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .bottleneck import BottleneckConfig
from .methods import METHOD_NAMES, AttributionSettings
from .models import TrainConfig, ToyCnnSpec
from .report import METRICS, EvaluationSettings
from .synthetic import GeneratorConfig

MODEL_KINDS = ("classifier", "regressor", "detector")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    kind: str = "classifier"
    channels_per_block: tuple[int, ...] = (8, 16, 32, 32)
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels_per_block", tuple(int(c) for c in self.channels_per_block))
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class EvaluationSection:
    methods: tuple[str, ...] = ("iba", "inverse-iba", "random")
    metrics: tuple[str, ...] = ("insertion", "deletion", "iou")
    settings: EvaluationSettings = field(default_factory=EvaluationSettings)

    def __post_init__(self) -> None:
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        for m in self.methods:
            if m not in METHOD_NAMES:
                raise ConfigError(f"unknown method {m!r} in evaluation.methods")
        for m in self.metrics:
            if m not in METRICS:
                raise ConfigError(f"unknown metric {m!r} in evaluation.metrics")


@dataclass(frozen=True)
class RunConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    attribution: AttributionSettings = field(default_factory=AttributionSettings)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seed: int = 0

    def model_spec(self, n_outputs: int | None = None) -> ToyCnnSpec:
        if n_outputs is None:
            n_outputs = {"classifier": self.data.n_classes, "regressor": 1, "detector": 3}[self.model.kind]
        return ToyCnnSpec(
            input_size=(self.data.image_size, self.data.image_size),
            channels_per_block=self.model.channels_per_block,
            n_outputs=n_outputs,
            head="scalar_linear" if self.model.kind == "regressor" else "multilabel_sigmoid",
            seed=self.seed if self.model.seed is None else self.model.seed,
        )

    def to_dict(self) -> dict:
        ev = self.evaluation
        return {
            "data": self.data.to_dict(),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "attribution": self.attribution.to_dict(),
            "evaluation": {"methods": list(ev.methods), "metrics": list(ev.metrics), **ev.settings.to_dict()},
            "seed": self.seed,
        }


# sections built straight from their dataclass
_SECTIONS = {
    "data": GeneratorConfig,
    "model": ModelSection,
    "train": TrainConfig,
}


def _check_keys(given: Mapping, allowed, where: str) -> None:
    if not isinstance(given, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        key = f"{where}.{unknown[0]}" if where else str(unknown[0])
        raise ConfigError(f"unknown config key {key!r}; allowed: {', '.join(sorted(allowed))}")


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _build(cls, values: Mapping, where: str):
    _check_keys(values, _names(cls), where)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where} section: {exc}") from exc


def from_dict(raw: Mapping[str, Any] | None) -> RunConfig:
    """Validate and resolve a nested mapping; unknown keys raise ConfigError naming the key."""
    raw = dict(raw or {})
    _check_keys(raw, _names(RunConfig), "")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    built = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name) or {})
        if name != "model":
            values.setdefault("seed", seed)
        built[name] = _build(cls, values, name)

    attr = dict(raw.get("attribution") or {})
    _check_keys(attr, _names(AttributionSettings), "attribution")
    bottleneck = dict(attr.pop("bottleneck", None) or {})
    bottleneck.setdefault("seed", seed)
    attr["bottleneck"] = _build(BottleneckConfig, bottleneck, "attribution.bottleneck")
    built["attribution"] = _build(AttributionSettings, attr, "attribution")

    ev = dict(raw.get("evaluation") or {})
    section_keys = ["methods", "metrics"]
    _check_keys(ev, section_keys + _names(EvaluationSettings), "evaluation")
    settings = _build(EvaluationSettings, {k: v for k, v in ev.items() if k not in section_keys}, "evaluation")
    built["evaluation"] = _build(
        EvaluationSection, {**{k: ev[k] for k in section_keys if k in ev}, "settings": settings}, "evaluation"
    )
    return RunConfig(seed=seed, **built)


def _set_path(raw: dict, dotted: str, value: Any) -> None:
    node = raw
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {part!r} is not a section")
    node[parts[-1]] = value


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read YAML or JSON (JSON is valid YAML), then apply dotted-key overrides; overrides win."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping at the top level")
    for dotted, value in (overrides or {}).items():
        _set_path(raw, dotted, value)
    return from_dict(raw)


def parse_override(text: str) -> tuple[str, Any]:
    """``key.sub=value`` with the value parsed as YAML (so ``3``, ``true``, ``[1, 2]`` work)."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    return key.strip(), yaml.safe_load(value)
