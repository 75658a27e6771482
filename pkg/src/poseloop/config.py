"""Run configuration: one JSON document covering every stage of an experiment."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .boicp import BoConfig, SearchBounds
from .nnet import TrainConfig
from .reconstruct import ReconConfig
from .registration import IcpConfig
from .simscene import GenConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    dataset: str = "data"
    models: str = "models"
    reports: str = "reports"


@dataclass(frozen=True)
class FailureSection:
    hidden: tuple[int, ...] = (32, 16)
    threshold: float = 0.5
    restarts: int = 1  # extra alignments per scene from perturbed true poses
    train: TrainConfig = TrainConfig(learning_rate=0.02, epochs=200, batch_size=32)


@dataclass(frozen=True)
class AttributionSection:
    n_points: int = 2048
    hidden: tuple[int, ...] = (32, 64)
    head_hidden: tuple[int, ...] = (64,)
    train: TrainConfig = TrainConfig(learning_rate=0.01, epochs=40, batch_size=16, loss_tag="cross-entropy")


@dataclass(frozen=True)
class ReconstructSection:
    model: ReconConfig = ReconConfig()
    train: TrainConfig = TrainConfig(learning_rate=0.02, epochs=30, batch_size=8, loss_tag="chamfer")


@dataclass(frozen=True)
class PipelineSection:
    success_threshold: float = 0.01
    max_mitigation_rounds: int = 1
    bo: BoConfig = BoConfig()
    bounds: SearchBounds = SearchBounds()
    nbv_visibility_samples: int = 512


@dataclass(frozen=True)
class RunConfig:
    format_version: int = CONFIG_VERSION
    paths: Paths = Paths()
    generation: GenConfig = field(default_factory=GenConfig)
    icp: IcpConfig = IcpConfig()
    failure: FailureSection = FailureSection()
    attribution: AttributionSection = AttributionSection()
    reconstruct: ReconstructSection = ReconstructSection()
    pipeline: PipelineSection = PipelineSection()

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        if d.get("format_version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config format_version {d.get('format_version')!r}")
        return _merge(cls(), d, "config")


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _merge(base, d: dict, where: str):
    """Overlay ``d`` on the dataclass instance ``base``; unknown keys are errors."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    changes = {}
    for key, value in d.items():
        current = getattr(base, key)
        if dataclasses.is_dataclass(current):
            changes[key] = _merge(current, value, f"{where}.{key}")
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected a list")
            changes[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            changes[key] = value
    try:
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(doc)
