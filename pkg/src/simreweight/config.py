"""Run configuration: one YAML document with a section per module.

Every field is reachable as ``section.field`` (``model.d_model``,
``reweight.K``, ``simulator.ranges.noise_sigma``) for command-line overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import DatasetConfig
from .errors import ConfigError, IoError
from .model import ModelConfig
from .pipeline import VARIANTS
from .reweighter import ReweightConfig
from .simulator import ScenarioConfig, default_ranges
from .trainer import TrainConfig

SECTIONS = ("simulator", "dataset", "model", "reweight", "train", "eval")
# window geometry is owned by the dataset section and mirrored into the model
SHARED_GEOMETRY = ("L_in", "L_token", "L_out", "patch_rows", "patch_cols")


@dataclass
class SimulatorConfig:
    ranges: dict = field(default_factory=default_ranges)
    real: dict = field(default_factory=lambda: ScenarioConfig().to_dict())

    def validate(self) -> "SimulatorConfig":
        unknown = set(self.ranges) - {f.name for f in dataclasses.fields(ScenarioConfig)}
        if unknown:
            raise ConfigError(f"unknown randomization range keys: {sorted(unknown)}")
        self.real_scenario()
        return self

    def real_scenario(self) -> ScenarioConfig:
        try:
            return ScenarioConfig.from_dict(dict(self.real))
        except TypeError as exc:
            raise ConfigError(f"simulator.real: {exc}") from exc


@dataclass
class EvalConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: list = field(default_factory=lambda: list(VARIANTS))
    single_task: int = 0
    corruption_samples: int = 40
    corrupt_fraction: float = 0.5

    def validate(self) -> "EvalConfig":
        if not self.seeds or any(not isinstance(s, int) for s in self.seeds):
            raise ConfigError("eval.seeds must be a nonempty list of integers")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}; expected a subset of {VARIANTS}")
        if self.corruption_samples < 2 or not 0.0 < self.corrupt_fraction < 1.0:
            raise ConfigError("eval.corruption_samples >= 2 and 0 < corrupt_fraction < 1 required")
        return self


_TYPES = {"simulator": SimulatorConfig, "dataset": DatasetConfig, "model": ModelConfig,
          "reweight": ReweightConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    reweight: ReweightConfig = field(default_factory=ReweightConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        for key in SHARED_GEOMETRY:
            if getattr(self.model, key) != getattr(self.dataset, key):
                raise ConfigError(f"model.{key} must equal dataset.{key}")
        return self

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict | None, overrides: dict | None = None) -> "RunConfig":
        doc = _merge_overrides(doc or {}, overrides or {})
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        dataset_doc = doc.get("dataset") or {}
        model_doc = dict(doc.get("model") or {})
        for key in SHARED_GEOMETRY:
            if key in dataset_doc and key not in model_doc:
                model_doc[key] = dataset_doc[key]
        sections = {}
        for name, kind in _TYPES.items():
            values = model_doc if name == "model" else (doc.get(name) or {})
            sections[name] = _build(kind, name, values)
        return cls(**sections).validate()


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(kind, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(kind)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    default = kind()
    kwargs = {}
    for key, value in values.items():
        if section == "simulator":
            base = dict(getattr(default, key))
            if not isinstance(value, dict):
                raise ConfigError(f"simulator.{key} must be a mapping")
            base.update(value)
            value = base
        kwargs[key] = _coerce(section, key, getattr(default, key), value)
    return kind(**kwargs)


def _coerce(section: str, key: str, default, value):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float) or (default is None and key == "w_bound"):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where} must be a list")
    return value


def parse_override(text: str) -> tuple:
    """``section.key=value`` with a YAML-parsed value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {text!r}: {exc}") from exc
    if isinstance(value, str):
        # YAML 1.1 reads exponent literals without a dot, such as 1e-4, as strings
        try:
            value = float(value)
        except ValueError:
            pass
    return key.strip(), value


def _merge_overrides(doc: dict, overrides: dict) -> dict:
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) < 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"override key {dotted!r} must start with one of {SECTIONS}")
        node = doc.setdefault(parts[0], {})
        if node is None:
            node = doc[parts[0]] = {}
        for part in parts[1:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override key {dotted!r} descends into a non-mapping")
            node[part] = nxt = dict(nxt)
            node = nxt
        node[parts[-1]] = value
    return doc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise IoError(f"config file {path} not found")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(doc, overrides)
