"""Run configuration loaded from YAML.

Every key has a default; unknown keys are rejected so typos fail loudly.
The resolved configuration is echoed next to every output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .appearance import AppearanceConfig
from .backbone import BackboneConfig
from .model import ModelConfig
from .structure import StructureConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 8
    n_heldout: int = 2
    n_styles: int = 8
    image_size: tuple = (64, 64)
    n_frames: int = 12


@dataclass
class ScheduleConfig:
    nvs2_steps: int = 2000
    nvs4_steps: int = 2000
    stylize_steps: int = 2000


@dataclass
class RenderConfig:
    # novel cameras: small orbit around the first input view
    orbit_frames: int = 8
    orbit_degrees: float = 6.0
    orbit_pivot_depth: float = 4.5


@dataclass
class RunConfig:
    seed: int = 0
    views: int = 4
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_keys(cls, data: dict, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")


def _build(cls, data: dict, where: str):
    _check_keys(cls, data, where)
    kwargs = {}
    types = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        default = types[key].default_factory() if types[key].default_factory is not dataclasses.MISSING else types[key].default
        if dataclasses.is_dataclass(default) and not isinstance(default, ModelConfig):
            kwargs[key] = _build(type(default), value or {}, f"{where}.{key}".lstrip("."))
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _model_config(data: dict) -> ModelConfig:
    _check_keys(ModelConfig, data, "model")
    for key, cls in (("backbone", BackboneConfig), ("structure", StructureConfig), ("appearance", AppearanceConfig)):
        _check_keys(cls, data.get(key) or {}, f"model.{key}")
    return ModelConfig.from_dict(data)


def from_dict(data: Optional[dict]) -> RunConfig:
    data = dict(data or {})
    _check_keys(RunConfig, data, "")
    model_data = data.pop("model", None) or {}
    model = _model_config(model_data)
    cfg = _build(RunConfig, data, "")
    cfg.train.validate()
    size = tuple(cfg.data.image_size)
    explicit = (model_data.get("backbone") or {}).get("image_size")
    if explicit is not None and tuple(explicit) != size:
        raise ConfigError("data.image_size and model.backbone.image_size disagree")
    model.backbone.image_size = size
    model.backbone.validate()
    cfg.model = model
    return cfg


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return from_dict(data)


def write_resolved(config: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path
