"""Run configuration: one YAML file with dsp / model / train / eval sections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp import DspConfig
from .model import HstConfig
from .training import TrainConfig


class RunConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    folds: int = 10
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    threshold: float = 0.5
    seed: int = 0
    balance: bool = True
    gradcam_stage: int = 4

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratios"] = list(self.ratios)
        return d


@dataclass
class RunConfig:
    dsp: DspConfig = field(default_factory=DspConfig)
    model: HstConfig = field(default_factory=HstConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {"dsp": self.dsp.to_dict(), "model": self.model.to_dict(),
                "train": self.train.to_dict(), "eval": self.eval.to_dict()}

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


SECTIONS = {"dsp": DspConfig, "model": HstConfig, "train": TrainConfig, "eval": EvalConfig}


def _coerce(section: str, key: str, value, default):
    """Match a scalar to its default's type; YAML 1.1 reads ``1e30`` as a string."""
    if value is None or default is None or isinstance(default, (tuple, list)):
        return value
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise RunConfigError(f"{section}.{key} must be true or false, got {value!r}")
        return value
    if kind in (int, float):
        if isinstance(value, bool):
            raise RunConfigError(f"{section}.{key} must be numeric, got {value!r}")
        try:
            out = kind(value) if kind is float else int(str(value), 10) if isinstance(value, str) else value
        except ValueError:
            raise RunConfigError(f"{section}.{key} must be {kind.__name__}, got {value!r}") from None
        if kind is int and (not isinstance(out, int) or isinstance(out, bool)):
            raise RunConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return out
    return value


def _build(cls, section: str, values: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise RunConfigError(f"unknown key {section}.{unknown[0]}")
    defaults = cls() if cls is not HstConfig else HstConfig()
    values = {k: _coerce(section, k, v, getattr(defaults, k)) for k, v in values.items()}
    if cls is HstConfig:
        variant = values.get("variant", "base")
        rest = {k: v for k, v in values.items() if k != "variant"}
        if variant == "micro":
            return HstConfig.micro(**rest)
        return HstConfig.from_variant(variant, **rest)
    return cls(**values)


def build_run_config(data: dict | None = None) -> RunConfig:
    data = data or {}
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise RunConfigError(f"unknown section {unknown[0]!r}")
    parts = {}
    for name, cls in SECTIONS.items():
        section = data.get(name) or {}
        if not isinstance(section, dict):
            raise RunConfigError(f"section {name!r} must be a mapping")
        try:
            parts[name] = _build(cls, name, section)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, RunConfigError):
                raise
            raise RunConfigError(f"{name}: {exc}") from exc
    return RunConfig(**parts)


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML file (or defaults) and apply dotted ``section.key`` overrides."""
    data = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise RunConfigError(f"{path}: top level must be a mapping")
        data = loaded or {}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise RunConfigError(f"override {dotted!r} must look like section.key")
        data.setdefault(section, {})
        if data[section] is None:
            data[section] = {}
        data[section][key] = value
    return build_run_config(data)


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise RunConfigError(f"override {text!r} must look like section.key=value")
    return key.strip(), yaml.safe_load(raw)
