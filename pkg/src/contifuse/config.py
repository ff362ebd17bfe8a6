"""Run configuration from flat dotted keys (``model.num_states: 7``)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from contifuse.data import AugmentationPolicy
from contifuse.model import ConfigError, ModelConfig
from contifuse.train import TrainConfig

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "aug": AugmentationPolicy}
_PATH_KEYS = {"data.root": None, "output.dir": "runs/contifuse"}


def known_keys() -> list[str]:
    keys = [f"{s}.{f.name}" for s, cls in _SECTIONS.items() for f in dataclasses.fields(cls)]
    return keys + list(_PATH_KEYS)


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(value, str) and not isinstance(default, str):
        value = yaml.safe_load(value)
    if key == "model.channel_schedule":
        if value is None:
            return None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list of integers")
        return tuple(value)
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return value


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    data_root: str | None = None
    out_dir: str = "runs/contifuse"

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "RunConfig":
        """Build and validate; every problem found is reported in one error."""
        errors = [f"unknown key {k!r}" for k in values if k not in known_keys()]
        kwargs: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
        for key, value in values.items():
            if key in _PATH_KEYS or key not in known_keys():
                continue
            section, name = key.split(".", 1)
            default = next(f for f in dataclasses.fields(_SECTIONS[section]) if f.name == name).default
            try:
                kwargs[section][name] = _coerce(value, default, key)
            except (ConfigError, yaml.YAMLError) as exc:
                errors.append(str(exc))
        built = {}
        for section, cls_ in _SECTIONS.items():
            try:
                obj = cls_(**kwargs[section])
                if isinstance(obj, TrainConfig):
                    obj.validate()
                built[section] = obj
            except (ConfigError, ValueError, TypeError) as exc:
                errors.append(f"{section}: {exc}")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return cls(
            built["model"],
            built["train"],
            built["aug"],
            values.get("data.root"),
            values.get("output.dir", _PATH_KEYS["output.dir"]),
        )

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                flat[f"{section}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        flat["data.root"] = self.data_root
        flat["output.dir"] = self.out_dir
        return flat

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_flat(), sort_keys=True))
        return path


def read_flat(path) -> dict[str, Any]:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of dotted keys")
    return dict(data)


def load_run_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values = read_flat(path) if path else {}
    values.update(overrides or {})
    return RunConfig.from_flat(values)
