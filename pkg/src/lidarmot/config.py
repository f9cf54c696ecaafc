"""Run configuration: one flat key = value file drives every module.

The file format is a TOML-style flat list of dotted keys::

    seed = 7
    perception.min_run = 5
    tracking.gate = 2.5
    scanner.num_rings = 16

Comments start with '#'. CLI flags override file values, so a run is fully
reproducible from (sequence, config file, overrides, seed).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .consistency import ConsistencyConfig
from .ego_odometry import EgoConfig
from .mapping import MappingConfig
from .perception import PerceptionConfig
from .simulate import BoxNoiseConfig, ScannerConfig
from .tracking import TrackingConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    use_detections: bool = True
    log_consistency: bool = False
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    ego: EgoConfig = field(default_factory=EgoConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)


@dataclass
class SimulateConfig:
    scene: str = "corridor"
    frames: int = 50
    seed: int = 0
    ego_speed: float = 2.0
    max_body_speed: float = 15.0
    scanner: ScannerConfig = field(default_factory=ScannerConfig)
    box_noise: BoxNoiseConfig = field(default_factory=BoxNoiseConfig)


def _parse_scalar(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def load_config_file(path: str | os.PathLike) -> dict:
    """Parse a flat key = value file into a dict of dotted keys."""
    values = {}
    with open(path) as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = _parse_scalar(value)
    return values


def _coerce(current, value, key: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        return str(value)
    raise ConfigError(f"{key}: unsupported option type {type(current).__name__}")


def apply_overrides(config, values: dict) -> None:
    """Apply dotted-key overrides to a RunConfig or SimulateConfig in place."""
    for key, value in values.items():
        target = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
                raise ConfigError(f"unknown config section: {key}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ConfigError(f"unknown config key: {key}")
        current = getattr(target, leaf)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key} is a section, not a value")
        setattr(target, leaf, _coerce(current, value, key))


def _flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            rows.extend(_flatten(value, prefix=f"{key}."))
        else:
            rows.append((key, value))
    return rows


def config_to_flat_dict(config) -> dict:
    return dict(_flatten(config))


def save_config(config, path: str | os.PathLike) -> None:
    with open(path, "w") as handle:
        for key, value in _flatten(config):
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = f'"{value}"'
            else:
                text = repr(value)
            handle.write(f"{key} = {text}\n")


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    config = RunConfig()
    if path is not None:
        apply_overrides(config, load_config_file(path))
    if overrides:
        apply_overrides(config, overrides)
    return config


def load_simulate_config(path=None, overrides: dict | None = None) -> SimulateConfig:
    config = SimulateConfig()
    if path is not None:
        values = load_config_file(path)
        # A shared file may carry pipeline keys too; keep only ours.
        known = {f.name for f in dataclasses.fields(SimulateConfig)}
        values = {
            k: v for k, v in values.items() if k.split(".", 1)[0] in known
        }
        apply_overrides(config, values)
    if overrides:
        apply_overrides(config, overrides)
    return config
